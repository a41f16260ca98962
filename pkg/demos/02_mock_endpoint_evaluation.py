#!/usr/bin/env python3
"""Walkthrough: evaluate a dataset against a chat endpoint, resume a batch.

A tiny in-process HTTP server stands in for the model: it answers the
recognition step with a referring phrase and the grounding step with the
ground-truth box, so the run scores 100%. Swap the URL for a real endpoint
and the code is identical.

    python3 demos/02_mock_endpoint_evaluation.py
"""

import json
import re
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from PIL import Image

from migkit import (
    CoordSpace,
    ImageRef,
    Instance,
    Journal,
    ModelEndpoint,
    Region,
    TaskKind,
    convert,
    run_batch,
    score,
)
from migkit.geometry import BBox
from migkit.outparse import render_box_token

IID = re.compile(r"\[iid:(\w+)\]")


def start_mock(instances):
    """Minimal OpenAI-compatible /chat/completions replaying scripted answers."""
    by_id = {inst.id: inst for inst in instances}

    def reply(payload):
        text = " ".join(part["text"] for part in payload["messages"][-1]["content"]
                        if part.get("type") == "text")
        inst = by_id[IID.search(text).group(1)]
        if "Don't generate additional words" in text:  # grounding request
            gt = inst.ground_truth[0]
            return render_box_token(convert(gt.box, gt.space, CoordSpace.norm1000()))
        return f"the blue marker [iid:{inst.id}]"      # recognition request

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            payload = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            body = json.dumps(
                {"choices": [{"message": {"content": reply(payload)}}]}).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    host, port = httpd.server_address
    return httpd, f"http://{host}:{port}/v1"


with tempfile.TemporaryDirectory() as tmp:
    img = Path(tmp) / "scene.png"
    Image.new("RGB", (800, 600), (200, 170, 90)).save(img)
    ref = ImageRef(path=str(img), width=800, height=600)

    instances = [
        Instance(id=f"demo{k}", task=TaskKind.REASONING, images=[ref, ref],
                 query_text=f"what holds the door open? find it [iid:demo{k}]",
                 ground_truth=[Region(1, BBox(120, 80, 420, 300),
                                      CoordSpace.norm1000())])
        for k in range(6)
    ]

    httpd, url = start_mock(instances)
    endpoint = ModelEndpoint(base_url=url, model="mock-model", max_concurrency=4,
                             timeout_s=10, backoff_s=0.05)
    journal_path = Path(tmp) / "journal.jsonl"

    # run only the first half, as if the batch had been killed ...
    run_batch(instances, endpoint, "cot_single", "polling", journal_path,
              max_instances=3)
    _, partial = Journal.read(journal_path)
    print(f"after the interrupted run: {len(partial)} records journaled")

    # ... resuming executes exactly the remaining instances
    records = run_batch(instances, endpoint, "cot_single", "polling", journal_path)
    print(f"after resuming:            {len(records)} records")

    report = score(records, instances)
    print()
    print(report.render_table())
    print()
    print("steps of one record:",
          [s.name for s in records[0].steps])  # step1 + one poll per image
    httpd.shutdown()
