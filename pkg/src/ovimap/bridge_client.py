"""Client for the model sidecar, plus its protocol-conformance harness.

The sidecar speaks newline-delimited JSON over stdio: a handshake line
announcing the embedding dimension, then one response per request, echoing
the request id in order. Images travel by file path. The conformance harness
drives 100 requests and checks id echo, dimension stability, and determinism;
it runs either against a live process or a recorded transcript.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ProviderError
from .semantics import Embedding

DEFAULT_BRIDGE_CMD = ["node", "bridge/dist/main.js", "serve", "--model", "stub"]


class BridgeTransport:
    """One live sidecar process, one outstanding request at a time."""

    def __init__(self, cmd: list[str] | None = None):
        self.cmd = list(cmd) if cmd else list(DEFAULT_BRIDGE_CMD)
        try:
            self.proc = subprocess.Popen(
                self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise ProviderError(f"cannot start bridge {self.cmd}: {exc}") from exc
        line = self.proc.stdout.readline()
        if not line:
            raise ProviderError(f"bridge {self.cmd} exited before handshake")
        try:
            self._handshake = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProviderError(f"bridge handshake is not JSON: {line!r}") from exc
        if "dim" not in self._handshake:
            raise ProviderError(f"bridge handshake missing dim: {self._handshake}")

    def handshake(self) -> dict:
        return self._handshake

    def send(self, request: dict) -> dict:
        self.proc.stdin.write(json.dumps(request) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise ProviderError("bridge closed the stream mid-session")
        return json.loads(line)

    def close(self) -> None:
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


class BridgeProvider:
    """FeatureProvider backed by a sidecar process.

    Crop rasters are exchanged as PNG files under ``crops_dir`` named
    ``%06d_%04d_%d.png`` (frame, instance, crop type); the extraction stage
    normally writes them before embedding, and this provider writes any that
    are missing.
    """

    def __init__(self, cmd: list[str] | None = None, crops_dir: str | Path | None = None):
        self.transport = BridgeTransport(cmd)
        self.dim = int(self.transport.handshake()["dim"])
        self.crops_dir = Path(crops_dir) if crops_dir is not None else None
        self._next_id = 0

    def _request(self, payload: dict) -> dict:
        payload["id"] = self._next_id
        self._next_id += 1
        resp = self.transport.send(payload)
        if resp.get("id") != payload["id"]:
            raise ProviderError(f"bridge echoed id {resp.get('id')} for request {payload['id']}")
        if not resp.get("ok"):
            raise ProviderError(f"bridge error: {resp.get('error')}")
        return resp

    def _crop_path(self, key, image, bbox, mask=None) -> tuple[Path, Path | None]:
        if self.crops_dir is None:
            raise ProviderError("bridge provider needs a crops directory")
        if key is None:
            key = (0, 0, self._next_id)
        frame, inst, crop_type = key
        stem = f"{frame:06d}_{inst:04d}_{crop_type}"
        img_path = self.crops_dir / f"{stem}.png"
        if not img_path.is_file():
            x0, y0, x1, y1 = bbox
            Image.fromarray(image[y0:y1, x0:x1]).save(img_path)
        mask_path = None
        if mask is not None:
            mask_path = self.crops_dir / f"{stem}_mask.png"
            if not mask_path.is_file():
                Image.fromarray(mask.astype(np.uint8) * 255).save(mask_path)
        return img_path, mask_path

    def _embedding(self, resp: dict) -> Embedding:
        vec = np.asarray(resp.get("embedding", []), dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ProviderError(f"bridge returned dimension {vec.shape} != {self.dim}")
        return Embedding(vec)

    def embed_image_region(self, image, bbox, key=None) -> Embedding:
        img_path, _ = self._crop_path(key, image, bbox)
        x1 = int(bbox[2]) - int(bbox[0])
        y1 = int(bbox[3]) - int(bbox[1])
        resp = self._request(
            {"op": "embed_region", "image_path": str(img_path), "bbox": [0, 0, x1, y1]}
        )
        return self._embedding(resp)

    def embed_masked_region(self, image, bbox, mask, key=None) -> Embedding:
        img_path, mask_path = self._crop_path(key, image, bbox, mask)
        x1 = int(bbox[2]) - int(bbox[0])
        y1 = int(bbox[3]) - int(bbox[1])
        resp = self._request(
            {
                "op": "embed_masked",
                "image_path": str(img_path),
                "mask_path": str(mask_path),
                "bbox": [0, 0, x1, y1],
            }
        )
        return self._embedding(resp)

    def embed_text(self, text: str) -> Embedding:
        return self._embedding(self._request({"op": "embed_text", "text": text}))

    def segment(self, image_path) -> str:
        resp = self._request({"op": "segment", "image_path": str(image_path)})
        mask_file = resp.get("mask_file")
        if not mask_file:
            raise ProviderError("bridge segment returned no mask_file")
        return mask_file

    def close(self) -> None:
        self.transport.close()


# ---------------------------------------------------------------------------
# conformance harness
# ---------------------------------------------------------------------------

_WORDS = [
    "chair", "table", "sofa", "lamp", "plant", "mug", "book", "door",
    "window", "pillow", "screen", "sink", "shelf", "rug", "vase", "clock",
    "where to sit", "something red", "a place to sleep", "kitchen tools",
]


def write_conformance_images(data_dir: str | Path) -> tuple[Path, Path, Path]:
    """Deterministic fixture images for the request set."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    g = np.meshgrid(np.arange(48), np.arange(64), indexing="ij")
    img0 = np.stack([(g[0] * 5) % 256, (g[1] * 3) % 256, (g[0] + g[1]) % 256], axis=-1).astype(np.uint8)
    rng = np.random.default_rng(1234)
    img1 = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
    mask = (g[0] + g[1]) % 2 == 0
    p0, p1, pm = data_dir / "conf_a.png", data_dir / "conf_b.png", data_dir / "conf_mask.png"
    Image.fromarray(img0).save(p0)
    Image.fromarray(img1).save(p1)
    Image.fromarray(mask.astype(np.uint8) * 255).save(pm)
    return p0, p1, pm


def build_conformance_requests(data_dir: str | Path) -> list[dict]:
    """100 embedding requests with planned repeats (ids assigned when sent)."""
    p0, p1, pm = write_conformance_images(data_dir)
    reqs: list[dict] = []
    for i in range(20):  # 40 text requests, each distinct prompt twice
        for _ in range(2):
            reqs.append({"op": "embed_text", "text": _WORDS[i]})
    for i in range(15):  # 30 region requests, each bbox twice
        img = str(p0 if i % 2 == 0 else p1)
        bbox = [i, i, 32 + i, 24 + i]
        for _ in range(2):
            reqs.append({"op": "embed_region", "image_path": img, "bbox": bbox})
    for i in range(15):  # 30 masked requests, each twice
        img = str(p1 if i % 2 == 0 else p0)
        bbox = [0, 0, 40 + i, 30 + i]
        for _ in range(2):
            reqs.append(
                {"op": "embed_masked", "image_path": img, "mask_path": str(pm), "bbox": bbox}
            )
    assert len(reqs) == 100
    return reqs


def _content_key(req: dict) -> tuple:
    def base(p):
        return Path(p).name if p else None

    return (
        req["op"],
        base(req.get("image_path")),
        base(req.get("mask_path")),
        tuple(req.get("bbox") or ()),
        req.get("text"),
    )


@dataclass
class ConformanceReport:
    ok: bool
    dim: int
    num_requests: int
    problems: list[str] = field(default_factory=list)


def run_conformance(transport, requests: list[dict]) -> ConformanceReport:
    """Drive the request set and check echo order, dimension, determinism."""
    problems: list[str] = []
    hs = transport.handshake()
    dim = int(hs.get("dim", 0))
    if dim <= 0:
        problems.append(f"handshake dim invalid: {hs}")
    seen: dict[tuple, list] = {}
    for i, req in enumerate(requests):
        payload = dict(req)
        payload["id"] = i
        resp = transport.send(payload)
        if resp.get("id") != i:
            problems.append(f"request {i}: echoed id {resp.get('id')}")
            continue
        if not resp.get("ok"):
            problems.append(f"request {i}: ok=false ({resp.get('error')})")
            continue
        vec = resp.get("embedding")
        if not isinstance(vec, list) or len(vec) != dim:
            problems.append(f"request {i}: embedding length {len(vec or [])} != {dim}")
            continue
        key = _content_key(req)
        if key in seen and seen[key] != vec:
            problems.append(f"request {i}: nondeterministic result for {key}")
        seen[key] = vec
    return ConformanceReport(not problems, dim, len(requests), problems)


# ---------------------------------------------------------------------------
# transcripts
# ---------------------------------------------------------------------------


class TranscriptTransport:
    """Replays a recorded session; requests match on content, not paths."""

    def __init__(self, transcript: dict | str | Path):
        if not isinstance(transcript, dict):
            transcript = json.loads(Path(transcript).read_text())
        self._handshake = transcript["handshake"]
        self._responses: dict[tuple, list[dict]] = {}
        for entry in transcript["exchanges"]:
            self._responses.setdefault(_content_key(entry["request"]), []).append(
                entry["response"]
            )

    def handshake(self) -> dict:
        return self._handshake

    def send(self, request: dict) -> dict:
        key = _content_key(request)
        bucket = self._responses.get(key)
        if not bucket:
            raise ProviderError(f"transcript has no response for {key}")
        return dict(bucket.pop(0) if len(bucket) > 1 else bucket[0])

    def close(self) -> None:
        pass


def record_transcript(cmd: list[str], data_dir: str | Path, out_path: str | Path) -> dict:
    """Run the live sidecar over the conformance set and save the session."""
    requests = build_conformance_requests(data_dir)
    transport = BridgeTransport(cmd)
    exchanges = []
    try:
        for i, req in enumerate(requests):
            payload = dict(req)
            payload["id"] = i
            exchanges.append({"request": payload, "response": transport.send(payload)})
    finally:
        transport.close()
    transcript = {"handshake": transport.handshake(), "exchanges": exchanges}
    Path(out_path).write_text(json.dumps(transcript, indent=1))
    return transcript
