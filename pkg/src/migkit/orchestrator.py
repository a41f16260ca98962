"""Drive an OpenAI-compatible chat endpoint through the inference strategies.

Strategies: ``direct`` (one grounding request), ``cot_single`` (referring
expression first, then grounding per the answering form) and ``cot_multi``
(same first step, grounding across all images in a single request).
Answering forms: ``polling`` fans the grounding step out one request per
candidate image; ``all`` covers every image in one request.

Batches stream into an append-only journal of checksummed records so an
interrupted run resumes where it stopped and expensive endpoint output stays
rescorable offline.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import requests

from .benchdata import Instance, RunRecord, StepRecord, TaskKind, dataset_id
from .geometry import BBox, CoordSpace, convert
from .outparse import extract_referring, parse_boxes, parse_image_choice
from .scoring import _grounding_boxes, match_targets
from .templates import TemplateBank, TemplateError, choice_list, render

API_KEY_ENV = "MIGKIT_API_KEY"

STRATEGIES = ("direct", "cot_single", "cot_multi")
FORMS = ("polling", "all")

# step-1 templates for these tasks reference a red box drawn onto the first image
MARKED_TASKS = frozenset(
    {TaskKind.OBJECT_TRACKING, TaskKind.MULTI_VIEW, TaskKind.CORRESPONDENCE}
)

RED_STROKE_WIDTH = 4


class TransportError(RuntimeError):
    """Endpoint unreachable after all retries; the instance is scored as a miss."""


class EndpointConfigError(RuntimeError):
    """4xx reply to our payload: a configuration bug, aborts the whole batch."""


class JournalError(RuntimeError):
    pass


@dataclass
class ModelEndpoint:
    base_url: str
    model: str
    api_key: str | None = None  # falls back to the MIGKIT_API_KEY env var
    timeout_s: float = 60.0
    max_retries: int = 3
    max_concurrency: int = 4
    backoff_s: float = 1.0

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")

    def resolved_key(self) -> str | None:
        return self.api_key or os.environ.get(API_KEY_ENV)


_RETRYABLE_STATUS = {408, 429}


class ChatClient:
    """Thin chat-completions client: greedy decoding, bounded retries."""

    def __init__(self, endpoint: ModelEndpoint):
        self.endpoint = endpoint
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def chat(self, messages: list[dict]) -> tuple[str, float]:
        ep = self.endpoint
        url = ep.base_url.rstrip("/") + "/chat/completions"
        payload = {"model": ep.model, "messages": messages, "temperature": 0}
        headers = {"Content-Type": "application/json"}
        key = ep.resolved_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"

        last_error: Exception | None = None
        start = time.perf_counter()
        for attempt in range(ep.max_retries):
            if attempt:
                time.sleep(ep.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self._session().post(url, json=payload, headers=headers,
                                            timeout=ep.timeout_s)
            except requests.RequestException as e:
                last_error = e
                continue
            if resp.status_code == 200:
                try:
                    content = resp.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, ValueError) as e:
                    raise EndpointConfigError(f"malformed completion payload: {e}") from e
                return content or "", time.perf_counter() - start
            if 400 <= resp.status_code < 500 and resp.status_code not in _RETRYABLE_STATUS:
                raise EndpointConfigError(
                    f"endpoint rejected request: HTTP {resp.status_code} {resp.text[:200]}"
                )
            last_error = RuntimeError(f"HTTP {resp.status_code}")
        raise TransportError(f"request failed after {ep.max_retries} attempts: {last_error}")


# --- message rendering --------------------------------------------------------


@lru_cache(maxsize=512)
def _encoded_image(path: str, mark: tuple[float, float, float, float] | None) -> str:
    """PNG data URL for an image file, optionally with a red rectangle drawn on a copy."""
    from PIL import Image, ImageDraw

    with Image.open(path) as im:
        im = im.convert("RGB")
        if mark is not None:
            draw = ImageDraw.Draw(im)
            draw.rectangle(mark, outline=(255, 0, 0), width=RED_STROKE_WIDTH)
        buf = io.BytesIO()
        im.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def _mark_for(inst: Instance, image_index: int) -> tuple | None:
    """Pixel rect of the visual-reference region when it sits on this image."""
    if not inst.query_regions:
        return None
    region = inst.query_regions[0]
    if region.image_index != image_index:
        return None
    img = inst.images[image_index]
    px = convert(region.box, region.space, CoordSpace.pixel(img.width, img.height))
    return px.as_tuple()


def _bindings(inst: Instance) -> dict[str, str]:
    out = {
        "QUESTION": inst.query_text or "",
        "CHOICES": choice_list(len(inst.images)),
        "IMAGE_K": str(2 if len(inst.images) > 1 else 1),
        "BOX": "",
    }
    if inst.query_regions:
        r = inst.query_regions[0]
        img = inst.images[r.image_index]
        norm = convert(r.box, r.space, CoordSpace.norm1000())
        out["BOX"] = "({:.0f},{:.0f}),({:.0f},{:.0f})".format(*norm.as_tuple())
    return out


def render_messages(inst: Instance, prompt: str, image_indices: list[int],
                    mark_reference: bool = False) -> list[dict]:
    """Chat payload: the selected images (instance order) then the prompt text."""
    content: list[dict] = []
    for k in image_indices:
        mark = _mark_for(inst, k) if mark_reference else None
        content.append({
            "type": "image_url",
            "image_url": {"url": _encoded_image(inst.images[k].path, mark)},
        })
    content.append({"type": "text", "text": prompt})
    return [{"role": "user", "content": content}]


# --- strategy execution ------------------------------------------------------


def _request_step(rec: RunRecord, client: ChatClient, inst: Instance, name: str,
                  prompt: str, image_indices: list[int], mark: bool) -> StepRecord:
    messages = render_messages(inst, prompt, image_indices, mark_reference=mark)
    raw, latency = client.chat(messages)
    step = StepRecord(name=name, image_indices=list(image_indices), prompt=prompt,
                      raw_response=raw, parsed=parse_boxes(raw), latency_s=latency)
    rec.steps.append(step)
    return step


def _execute(inst: Instance, client: ChatClient, strategy: str, form: str,
             bank: TemplateBank, rec: RunRecord) -> None:
    all_images = list(range(len(inst.images)))
    suffix = bank.format_suffix
    bindings = _bindings(inst)
    mark = inst.task in MARKED_TASKS and bool(inst.query_regions)

    if strategy == "direct":
        prompt = render(bank.direct(inst.task), suffix, **bindings)
        if form == "polling" and len(all_images) > 1:
            for k in all_images:
                _request_step(rec, client, inst, f"direct/image{k}", prompt, [k], mark)
        else:
            _request_step(rec, client, inst, "direct", prompt, all_images, mark)
        return

    # chain-of-thought: recognition over all images first
    step1_prompt = render(bank.cot(inst.task, 1), suffix, **bindings)
    step1 = _request_step(rec, client, inst, "step1", step1_prompt, all_images, mark)

    if inst.task is TaskKind.GROUP_GROUNDING:
        selected = parse_image_choice(step1.raw_response, len(inst.images))
        if selected is None:
            selected = 0  # unparseable selection falls back to the first image
        prompt = render(bank.cot(inst.task, 2), suffix, **bindings)
        _request_step(rec, client, inst, f"step2/image{selected}", prompt, [selected], False)
        return

    referring = extract_referring(step1.raw_response)
    step1.parsed.referring_text = referring
    step2_prompt = render(bank.cot(inst.task, 2), suffix,
                          **{**bindings, "RESPONSE": referring})

    if strategy == "cot_single" and form == "polling" and len(all_images) > 1:
        for k in all_images:
            _request_step(rec, client, inst, f"step2/image{k}", step2_prompt, [k], False)
    else:
        # cot_multi grounds across all images in one request, as does form=all
        _request_step(rec, client, inst, "step2", step2_prompt, all_images, False)


def run_instance(inst: Instance, client: ChatClient, strategy: str, form: str,
                 bank: TemplateBank | None = None) -> RunRecord:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if form not in FORMS:
        raise ValueError(f"unknown answering form {form!r}")
    bank = bank or TemplateBank.default()
    rec = RunRecord(instance_id=inst.id, strategy=strategy, form=form)
    try:
        _execute(inst, client, strategy, form, bank, rec)
    except TransportError as e:
        rec.failed = True
        rec.error = str(e)
    rec.per_target_iou, rec.per_target_hit = match_targets(_grounding_boxes(rec), inst)
    return rec


# --- journal -------------------------------------------------------------------


@dataclass
class Journal:
    path: Path
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def write_header(self, header: dict) -> None:
        line = json.dumps({"kind": "header", **header}, sort_keys=True)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()

    def append(self, record: RunRecord) -> None:
        line = json.dumps(
            {"kind": "record", "sha256": record.checksum(), "record": record.to_json()},
            sort_keys=True, ensure_ascii=False,
        )
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()

    @staticmethod
    def read(path: str | Path) -> tuple[dict | None, list[RunRecord]]:
        """Header and all checksum-valid records; corrupt lines are dropped so a
        truncated tail from a killed run simply re-executes on resume."""
        path = Path(path)
        header = None
        records: list[RunRecord] = []
        if not path.exists():
            return header, records
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except ValueError:
                    continue
                if obj.get("kind") == "header":
                    header = obj
                    continue
                if obj.get("kind") != "record":
                    continue
                try:
                    rec = RunRecord.from_json(obj["record"])
                except (KeyError, TypeError, ValueError):
                    continue
                if rec.checksum() != obj.get("sha256"):
                    continue
                records.append(rec)
        return header, records


def run_batch(instances: list[Instance], endpoint: ModelEndpoint, strategy: str,
              form: str, journal_path: str | Path,
              bank: TemplateBank | None = None,
              run_config: dict | None = None,
              max_instances: int | None = None) -> list[RunRecord]:
    """Evaluate a dataset against an endpoint, journaling each finished record.

    Re-running against an existing journal skips instances that already have a
    successful record (failed ones are retried). ``max_instances`` caps how
    many pending instances this invocation executes, for smoke runs and for
    deliberately splitting a batch.
    """
    from concurrent.futures import ThreadPoolExecutor

    bank = bank or TemplateBank.default()
    journal_path = Path(journal_path)
    ds_id = dataset_id(instances)

    header, existing = Journal.read(journal_path)
    journal = Journal(journal_path)
    if header is None:
        journal.write_header({
            "dataset_id": ds_id,
            "strategy": strategy,
            "form": form,
            "endpoint": {"base_url": endpoint.base_url, "model": endpoint.model},
            "run_config": run_config or {},
        })
    else:
        for key, got in (("dataset_id", ds_id), ("strategy", strategy), ("form", form)):
            if header.get(key) != got:
                raise JournalError(
                    f"journal {key} mismatch: journal has {header.get(key)!r}, "
                    f"run requested {got!r}"
                )

    done = {r.instance_id for r in existing if not r.failed}
    pending = [inst for inst in instances if inst.id not in done]
    if max_instances is not None:
        pending = pending[:max_instances]

    client = ChatClient(endpoint)
    new_records: list[RunRecord] = []
    if pending:
        with ThreadPoolExecutor(max_workers=endpoint.max_concurrency) as pool:
            futures = [pool.submit(run_instance, inst, client, strategy, form, bank)
                       for inst in pending]
            try:
                for fut in futures:
                    rec = fut.result()
                    journal.append(rec)
                    new_records.append(rec)
            except EndpointConfigError:
                for f in futures:
                    f.cancel()
                raise

    by_id = {r.instance_id: r for r in existing}
    by_id.update({r.instance_id: r for r in new_records})
    return [by_id[inst.id] for inst in instances if inst.id in by_id]


def journal_fingerprint(path: str | Path) -> str:
    """Digest over canonical record payloads, independent of timing fields."""
    _, records = Journal.read(path)
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.instance_id):
        h.update(rec.canonical_json().encode())
    return h.hexdigest()
