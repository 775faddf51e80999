"""Generator bridge.

External backends are driven through files: we write a JSON Lines request
manifest, run ``command <requests.jsonl> <results.jsonl>`` and read back a
JSON Lines results manifest. The builtin compositor paints prototype
composites over a background and stands in for a real generator (it is also
a copy-paste baseline).
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._util import write_jsonl
from .conditions import ConditionBundle, paint_order, read_manifest
from .errors import BackgroundSizeMismatch, CommandNotFound, MalformedResults
from .raster import image_size, load_image, pixel_rect

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 120


@dataclass(frozen=True)
class GenerationRequest:
    patch_id: str
    bundle_manifest: str
    output_path: str

    def to_json(self) -> dict:
        return {"patch_id": self.patch_id, "bundle_manifest": self.bundle_manifest,
                "output_path": self.output_path}


@dataclass(frozen=True)
class GenerationResult:
    patch_id: str
    status: str  # "ok" | "failed"
    reason: Optional[str] = None
    image_path: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        doc = {"patch_id": self.patch_id, "status": self.status}
        if self.reason is not None:
            doc["reason"] = self.reason
        if self.image_path is not None:
            doc["image_path"] = self.image_path
        return doc


def read_results(path: Path) -> Dict[str, dict]:
    """Parse a results manifest; later lines for the same patch win."""
    out = {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        return out
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            pid, status = row["patch_id"], row["status"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedResults(f"{path}:{n}: {exc}") from exc
        if status not in ("ok", "failed"):
            raise MalformedResults(f"{path}:{n}: unknown status {status!r}")
        out[pid] = row
    return out


def _check_output(req: GenerationRequest, row: Optional[dict]) -> GenerationResult:
    if row is None:
        return GenerationResult(req.patch_id, "failed", "missing result")
    if row["status"] != "ok":
        return GenerationResult(req.patch_id, "failed", row.get("reason") or "failed")
    out = Path(row.get("image_path") or req.output_path)
    if not out.exists():
        return GenerationResult(req.patch_id, "failed", "missing output")
    try:
        size = image_size(out)
    except OSError:
        return GenerationResult(req.patch_id, "failed", "unreadable output")
    expected = tuple(read_manifest(Path(req.bundle_manifest))["canvas"])
    if tuple(size) != expected:
        return GenerationResult(req.patch_id, "failed", f"output size {size[0]}x{size[1]} != canvas {expected[0]}x{expected[1]}")
    return GenerationResult(req.patch_id, "ok", image_path=str(out))


def _run_batch(argv: List[str], batch: Sequence[GenerationRequest], workdir: Path, idx: int,
               timeout_s: float) -> List[GenerationResult]:
    req_path = workdir / f"requests_{idx:04d}.jsonl"
    res_path = workdir / f"results_{idx:04d}.jsonl"
    write_jsonl(req_path, [r.to_json() for r in batch])
    failure = None
    try:
        proc = subprocess.run(argv + [str(req_path), str(res_path)], capture_output=True,
                              timeout=timeout_s, check=False)
        if proc.returncode != 0:
            failure = f"exit {proc.returncode}"
            logger.warning("generator batch %d exited %d: %s", idx, proc.returncode,
                           proc.stderr.decode(errors="replace")[-500:])
    except subprocess.TimeoutExpired:
        failure = "timeout"
    rows = read_results(res_path)
    results = []
    for req in batch:
        row = rows.get(req.patch_id)
        if failure is not None and (row is None or row["status"] != "ok"):
            results.append(GenerationResult(req.patch_id, "failed", failure))
        else:
            results.append(_check_output(req, row))
    return results


def run_external(requests: Sequence[GenerationRequest], command: Union[str, Sequence[str]],
                 parallelism: int = 1, timeout_s: float = DEFAULT_TIMEOUT_S) -> List[GenerationResult]:
    """Run an external generator over ``requests`` in ``parallelism`` concurrent batches.

    Results come back in request order, one per request. Each batch gets
    ``timeout_s`` per request it holds.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    ids = [r.patch_id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patch_id in generation requests")
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    if not argv or shutil.which(argv[0]) is None:
        raise CommandNotFound(f"generator command not found: {argv[0] if argv else command!r}")
    if not requests:
        return []
    n_batches = min(parallelism, len(requests))
    batches = [list(requests[i::n_batches]) for i in range(n_batches)]
    with tempfile.TemporaryDirectory(prefix="aerialsynth-gen-") as tmp:
        with ThreadPoolExecutor(max_workers=n_batches) as pool:
            futures = [pool.submit(_run_batch, argv, b, Path(tmp), i, timeout_s * len(b))
                       for i, b in enumerate(batches)]
            by_id = {r.patch_id: r for f in futures for r in f.result()}
    return [by_id[pid] for pid in ids]


Background = Union[str, Tuple[int, int, int], np.ndarray]


def _background(spec: Background, canvas: Tuple[int, int]) -> np.ndarray:
    w, h = canvas
    if isinstance(spec, np.ndarray):
        arr = spec
    elif isinstance(spec, (str, os.PathLike)) and str(spec) == "zero":
        return np.zeros((h, w, 3), dtype=np.uint8)
    elif isinstance(spec, (tuple, list)):
        return np.broadcast_to(np.asarray(spec, dtype=np.uint8), (h, w, 3)).copy()
    else:
        arr = load_image(Path(spec))
    if arr.shape[:2] != (h, w):
        raise BackgroundSizeMismatch(f"background {arr.shape[1]}x{arr.shape[0]} != canvas {w}x{h}")
    return np.array(arr, dtype=np.uint8)


def run_builtin_compositor(bundle: ConditionBundle, background: Background = "zero", seed: int = 0,
                           noise_std: float = 0.0) -> np.ndarray:
    """Paint the bundle's prototype composites over ``background``.

    ``background`` is ``"zero"``, an RGB triple, an image path or an array.
    With ``noise_std > 0`` seeded Gaussian pixel noise is added to the result.
    """
    canvas = tuple(bundle.canvas_size)
    out = _background(background, canvas)
    boxes = [o.bbox for o in bundle.objects]
    for j in paint_order(boxes):
        x0, y0, x1, y1 = pixel_rect(boxes[j], canvas[0], canvas[1])
        out[y0:y1, x0:x1] = bundle.per_object_canvases[j][y0:y1, x0:x1]
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        noisy = out.astype(np.float64) + rng.normal(0.0, noise_std, out.shape)
        out = np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8)
    return out
