from __future__ import annotations

import pytest

from conftest import make_instance, region
from migkit.benchdata import TaskKind
from migkit.orchestrator import (
    ChatClient,
    EndpointConfigError,
    Journal,
    ModelEndpoint,
    journal_fingerprint,
    render_messages,
    run_batch,
    run_instance,
)
from migkit.scoring import score
from migkit.templates import TemplateBank, TemplateError
from mockserver import MockChatServer, constant_script, image_count, oracle_script

BANK = TemplateBank.default()


@pytest.fixture
def server_factory():
    servers = []

    def make(script, delay_s: float = 0.0) -> tuple[MockChatServer, ModelEndpoint]:
        srv = MockChatServer(script, delay_s=delay_s)
        url = srv.start()
        servers.append(srv)
        ep = ModelEndpoint(base_url=url, model="mock", timeout_s=5,
                           backoff_s=0.01, max_concurrency=4)
        return srv, ep

    yield make
    for srv in servers:
        srv.stop()


def tagged_instance(tmp_path, iid, task=TaskKind.REASONING, n_images=2, gt=None):
    inst = make_instance(tmp_path, iid, task, n_images=n_images, gt=gt,
                         query_text=f"find the marked target [iid:{iid}]")
    return inst


class TestEndpoint:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ModelEndpoint("http://x", "m", max_concurrency=0)
        with pytest.raises(ValueError):
            ModelEndpoint("http://x", "m", timeout_s=0)

    def test_api_key_env_fallback(self, monkeypatch):
        monkeypatch.setenv("MIGKIT_API_KEY", "sekrit")
        assert ModelEndpoint("http://x", "m").resolved_key() == "sekrit"


class TestRunInstance:
    def test_scripted_oracle_hits(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "o1")
        srv, ep = server_factory(oracle_script([inst]))
        rec = run_instance(inst, ChatClient(ep), "direct", "all", BANK)
        assert rec.per_target_hit == [True]
        assert not rec.failed

    def test_full_frame_constant_hit_rule(self, tmp_path, server_factory):
        big = tagged_instance(tmp_path, "big", gt=[region(0, 0, 0, 900, 900)])
        small = tagged_instance(tmp_path, "small", gt=[region(0, 0, 0, 100, 100)])
        srv, ep = server_factory(constant_script("(0,0),(999,999)"))
        client = ChatClient(ep)
        assert run_instance(big, client, "direct", "all", BANK).per_target_hit == [True]
        assert run_instance(small, client, "direct", "all", BANK).per_target_hit == [False]

    def test_group_grounding_selection_recorded(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "gg", TaskKind.GROUP_GROUNDING,
                               n_images=4, gt=[region(2, 100, 100, 600, 600)])
        srv, ep = server_factory(oracle_script([inst]))
        rec = run_instance(inst, ChatClient(ep), "cot_single", "polling", BANK)
        assert [s.name for s in rec.steps] == ["step1", "step2/image2"]
        assert rec.steps[1].image_indices == [2]
        assert rec.per_target_hit == [True]

    def test_group_grounding_falls_back_to_first_image(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "gf", TaskKind.GROUP_GROUNDING, n_images=3)

        def script(payload):
            from mockserver import prompt_text
            if "which image is it in" in prompt_text(payload):
                return "no idea"
            return "(1,1),(2,2)"

        srv, ep = server_factory(script)
        rec = run_instance(inst, ChatClient(ep), "cot_single", "polling", BANK)
        assert rec.steps[1].name == "step2/image0"

    def test_cot_polling_fans_out_per_image(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "p3", n_images=3)
        srv, ep = server_factory(oracle_script([inst]))
        rec = run_instance(inst, ChatClient(ep), "cot_single", "polling", BANK)
        assert [s.name for s in rec.steps] == \
            ["step1", "step2/image0", "step2/image1", "step2/image2"]

    def test_cot_single_one_image_makes_two_requests(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "p1", n_images=1)
        srv, ep = server_factory(oracle_script([inst]))
        rec = run_instance(inst, ChatClient(ep), "cot_single", "polling", BANK)
        assert srv.request_count == 2
        assert [s.name for s in rec.steps] == ["step1", "step2"]

    def test_cot_multi_grounds_in_one_request(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "m3", n_images=3)
        srv, ep = server_factory(oracle_script([inst]))
        rec = run_instance(inst, ChatClient(ep), "cot_multi", "all", BANK)
        assert [s.name for s in rec.steps] == ["step1", "step2"]
        assert rec.steps[1].image_indices == [0, 1, 2]

    def test_purity_given_deterministic_endpoint(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "pure")
        srv, ep = server_factory(oracle_script([inst]))
        client = ChatClient(ep)
        a = run_instance(inst, client, "cot_single", "polling", BANK)
        b = run_instance(inst, client, "cot_single", "polling", BANK)
        assert a.canonical_json() == b.canonical_json()

    def test_transport_failure_marks_record_failed(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "dead")
        srv, ep = server_factory(lambda payload: (503, "overloaded"))
        rec = run_instance(inst, ChatClient(ep), "direct", "all", BANK)
        assert rec.failed and "attempts" in (rec.error or "")
        assert rec.per_target_hit == [False]
        assert srv.request_count == ep.max_retries

    def test_4xx_aborts(self, tmp_path, server_factory):
        inst = tagged_instance(tmp_path, "bad")
        srv, ep = server_factory(lambda payload: (400, "bad request"))
        with pytest.raises(EndpointConfigError):
            run_instance(inst, ChatClient(ep), "direct", "all", BANK)


class TestRenderMessages:
    def test_images_precede_text_in_instance_order(self, tmp_path):
        inst = tagged_instance(tmp_path, "ord", n_images=3)
        msgs = render_messages(inst, "prompt", [0, 1, 2])
        kinds = [p["type"] for p in msgs[0]["content"]]
        assert kinds == ["image_url", "image_url", "image_url", "text"]

    def test_marked_reference_changes_image_payload(self, tmp_path):
        inst = make_instance(tmp_path, "trk", TaskKind.OBJECT_TRACKING, n_images=2,
                             query_regions=[region(0, 100, 100, 500, 500)],
                             query_text=None)
        plain = render_messages(inst, "p", [0], mark_reference=False)
        marked = render_messages(inst, "p", [0], mark_reference=True)
        assert plain[0]["content"][0]["image_url"] != marked[0]["content"][0]["image_url"]
        # the mark sits on image 0 only; image 1 renders identically
        assert render_messages(inst, "p", [1], True)[0]["content"][0] == \
            render_messages(inst, "p", [1], False)[0]["content"][0]

    def test_missing_template_names_task_and_step(self):
        with pytest.raises(TemplateError, match="freeform.*step=3"):
            BANK.cot(TaskKind.FREEFORM, 3)

    def test_step1_marks_tracking_reference(self, tmp_path, server_factory):
        inst = make_instance(tmp_path, "mv", TaskKind.OBJECT_TRACKING, n_images=2,
                             query_regions=[region(0, 100, 100, 500, 500)],
                             query_text="track it [iid:mv]",
                             gt=[region(1, 100, 100, 500, 500)])
        srv, ep = server_factory(oracle_script([inst]))
        run_instance(inst, ChatClient(ep), "cot_single", "all", BANK)
        step1_payload = srv.payloads[0]
        assert image_count(step1_payload) == 2


class TestRunBatch:
    def _dataset(self, tmp_path, n=10):
        return [tagged_instance(tmp_path, f"b{k}") for k in range(n)]

    def test_batch_journal_and_perfect_report(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path)
        srv, ep = server_factory(oracle_script(instances))
        journal = tmp_path / "run.jsonl"
        records = run_batch(instances, ep, "cot_single", "polling", journal)
        assert len(records) == 10
        report = score(records, instances)
        assert report.macro_average == 100.0
        header, stored = Journal.read(journal)
        assert header["strategy"] == "cot_single"
        assert len(stored) == 10

    def test_concurrency_bound_respected(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path)
        srv, ep = server_factory(oracle_script(instances), delay_s=0.02)
        run_batch(instances, ep, "direct", "all", tmp_path / "j.jsonl")
        assert srv.max_inflight <= ep.max_concurrency

    def test_resume_skips_completed(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path)
        srv, ep = server_factory(oracle_script(instances))
        journal = tmp_path / "resume.jsonl"
        run_batch(instances, ep, "direct", "all", journal, max_instances=5)
        count_after_first = srv.request_count
        assert count_after_first == 5
        records = run_batch(instances, ep, "direct", "all", journal)
        assert srv.request_count == 10  # exactly the 5 remaining executed
        assert len(records) == 10
        # a third run does nothing
        run_batch(instances, ep, "direct", "all", journal)
        assert srv.request_count == 10

    def test_kill_resume_report_identical_to_clean_run(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path)
        srv, ep = server_factory(oracle_script(instances))
        clean = tmp_path / "clean.jsonl"
        run_batch(instances, ep, "cot_single", "polling", clean)
        split = tmp_path / "split.jsonl"
        run_batch(instances, ep, "cot_single", "polling", split, max_instances=5)
        run_batch(instances, ep, "cot_single", "polling", split)
        assert journal_fingerprint(split) == journal_fingerprint(clean)
        _, a = Journal.read(split)
        _, b = Journal.read(clean)
        assert score(a, instances).to_json_str() == score(b, instances).to_json_str()

    def test_corrupt_tail_line_is_retried(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path, n=3)
        srv, ep = server_factory(oracle_script(instances))
        journal = tmp_path / "trunc.jsonl"
        run_batch(instances, ep, "direct", "all", journal)
        lines = journal.read_text().splitlines()
        journal.write_text("\n".join(lines[:-1] + [lines[-1][: len(lines[-1]) // 2]]) + "\n")
        before = srv.request_count
        run_batch(instances, ep, "direct", "all", journal)
        assert srv.request_count == before + 1

    def test_dataset_mismatch_rejected(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path, n=3)
        srv, ep = server_factory(oracle_script(instances))
        journal = tmp_path / "mix.jsonl"
        run_batch(instances, ep, "direct", "all", journal)
        other = [tagged_instance(tmp_path, "zzz")]
        from migkit.orchestrator import JournalError
        with pytest.raises(JournalError, match="dataset_id"):
            run_batch(other, ep, "direct", "all", journal)

    def test_failed_records_do_not_block_batch(self, tmp_path, server_factory):
        instances = self._dataset(tmp_path, n=4)
        flaky_ids = {instances[1].id}

        base = oracle_script(instances)

        def script(payload):
            from mockserver import IID, prompt_text
            m = IID.search(prompt_text(payload))
            if m and m.group(1) in flaky_ids:
                return (503, "boom")
            return base(payload)

        srv, ep = server_factory(script)
        records = run_batch(instances, ep, "direct", "all", tmp_path / "f.jsonl")
        by_id = {r.instance_id: r for r in records}
        assert by_id[instances[1].id].failed
        assert sum(1 for r in records if not r.failed) == 3

    def test_empty_dataset_succeeds(self, tmp_path, server_factory):
        srv, ep = server_factory(constant_script("x"))
        assert run_batch([], ep, "direct", "all", tmp_path / "e.jsonl") == []
