"""Pipeline stages.

Each stage reads the previous stages' outputs from the configured output
directory, validates them, and only then rewrites its own subdirectory:

    prototypes/   prototype bank (index.json + crops) and summary.json
    dense/        focal-region patches, COCO annotations, regions.json
    conditions/   one bundle directory per patch plus index.json
    generated/    generated patches, requests.jsonl, results.jsonl
    refined/      COCO annotations, per-patch provenance, report.json
    merged/       merged images, COCO annotations, plan.json
    report.json   pipeline summary (the only file carrying a timestamp)
"""

from __future__ import annotations

import json
import logging
import shutil
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from ._util import derive_seed, parallel_map, write_json, write_jsonl
from .conditions import build_bundle, read_bundle, write_bundle
from .config import ImageBackground, PipelineConfig
from .detector_io import (
    ClassScoreModel,
    detections_to_json,
    fit_class_score_model,
    load_dataset,
    load_detections,
    write_dataset,
)
from .errors import (
    ConfigError,
    FileNotFound,
    MalformedFile,
    MissingUpstream,
)
from .focal import crop_region, extract_focal_regions
from .generator import GenerationRequest, read_results, run_builtin_compositor, run_external
from .geometry import Annotation, Detection, ImageRecord, clamp_box
from .merge import MOSAIC, execute_merge, plan_mosaic, plan_paste_back
from .prototypes import (
    ExternalEmbeddings,
    builtin_embedder,
    read_bank,
    select_prototypes as _select_prototypes,
    select_visual_candidates,
    write_bank,
)
from .raster import load_image, save_image
from .refine import DetectorNoise, RefineConfig, RefineReport, refine as _refine, simulate_detections

logger = logging.getLogger(__name__)

STAGES = ("select-prototypes", "extract-regions", "build-conditions", "generate", "refine", "merge")


def _stage_dir(cfg: PipelineConfig, name: str) -> Path:
    return cfg.output_dir / name


def _require(path: Path, stage: str, upstream: str) -> Path:
    if not path.exists():
        raise MissingUpstream(f"stage '{stage}' needs the output of '{upstream}' (missing {path})")
    return path


def _reset(directory: Path) -> Path:
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    return directory


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc


def _check_images_exist(dataset, images) -> None:
    for rec in images:
        p = dataset.image_path(rec)
        if not p.exists():
            raise FileNotFound(f"file not found: {p}")


# --- stage: prototypes -----------------------------------------------------------

def select_prototypes(cfg: PipelineConfig, jobs: int = 1) -> dict:
    dataset = load_dataset(cfg.resolve(cfg.paths.dataset))
    if cfg.paths.detections is None:
        raise ConfigError("paths.detections is required to select prototypes")
    dets = load_detections(cfg.resolve(cfg.paths.detections))
    pc = cfg.prototype
    model = fit_class_score_model(dets, classes=dataset.categories)
    cands = select_visual_candidates(dataset, dets, model, pc.tau_det, pc.alpha)
    if pc.embedding_source == "builtin":
        embedder = builtin_embedder
    else:
        embedder = ExternalEmbeddings.load(cfg.resolve(pc.embedding_source))

    needed = sorted({m.annotation.image_id for cs in cands.values() for m in cs.members})
    records = [dataset.image(i) for i in needed]
    _check_images_exist(dataset, records)
    pixels = dict(zip(needed, parallel_map(lambda r: load_image(dataset.image_path(r)), records, jobs)))
    bank = _select_prototypes(cands, dataset, pc.tau_lat_quantile, embedder,
                              image_loader=lambda rec: pixels[rec.id])

    out = _reset(_stage_dir(cfg, "prototypes"))
    write_bank(out, bank)
    summary = {
        "stage": "select-prototypes",
        "classes": {
            str(c): {
                "name": dataset.categories.get(c, str(c)),
                "score_threshold": cands[c].score_threshold,
                "n_candidates": len(cands[c].members),
                "n_prototypes": len(bank.get(c, [])),
            }
            for c in sorted(cands)
        },
        "score_model": model.to_json(),
    }
    write_json(out / "summary.json", summary)
    return {"stage": "select-prototypes",
            "prototypes_per_class": {str(c): len(v) for c, v in sorted(bank.items())}}


# --- stage: focal regions --------------------------------------------------------

def extract_regions(cfg: PipelineConfig, jobs: int = 1) -> dict:
    dataset = load_dataset(cfg.resolve(cfg.paths.dataset))
    fc = cfg.focal
    regions = extract_focal_regions(dataset, fc.k_default, fc.window_size, cfg.focal_seed, jobs,
                                    fc.keep_clipped_min_visibility)
    by_image: Dict[int, list] = {}
    for r in regions:
        by_image.setdefault(r.image_id, []).append(r)
    sources = [dataset.image(i) for i in sorted(by_image)]
    _check_images_exist(dataset, sources)
    if not regions:
        logger.warning("no focal regions extracted (window %d)", fc.window_size)

    out = _reset(_stage_dir(cfg, "dense"))
    patch_ids = {r.patch_id: n for n, r in enumerate(regions, start=1)}

    def crop_image(rec: ImageRecord) -> None:
        img = load_image(dataset.image_path(rec))
        for r in by_image[rec.id]:
            save_image(out / f"{r.patch_id}.png", crop_region(img, r))

    parallel_map(crop_image, sources, jobs)

    size = fc.window_size
    images = [ImageRecord(patch_ids[r.patch_id], size, size, f"{r.patch_id}.png") for r in regions]
    anns = [Annotation(patch_ids[r.patch_id], a.bbox, a.category_id) for r in regions for a in r.contained]
    write_dataset(out / "annotations.json", images, anns, dataset.categories)
    sidecar = [
        {
            "patch_id": r.patch_id,
            "patch_image_id": patch_ids[r.patch_id],
            "source_image_id": r.image_id,
            "origin": list(r.origin),
            "size": [size, size],
            "cluster_center": list(r.cluster_center),
            "n_contained": len(r.contained),
        }
        for r in regions
    ]
    write_json(out / "regions.json", {"regions": sidecar})
    hist = Counter(len(by_image.get(img.id, [])) for img in dataset.images)
    return {"stage": "extract-regions", "n_patches": len(regions),
            "regions_per_image_histogram": {str(k): v for k, v in sorted(hist.items())}}


def _load_regions(cfg: PipelineConfig, stage: str) -> List[dict]:
    path = _require(_stage_dir(cfg, "dense") / "regions.json", stage, "extract-regions")
    return _read_json(path)["regions"]


# --- stage: conditions -----------------------------------------------------------

def build_conditions(cfg: PipelineConfig, jobs: int = 1) -> dict:
    stage = "build-conditions"
    bank = read_bank(_require(_stage_dir(cfg, "prototypes"), stage, "select-prototypes"))
    dense = load_dataset(_require(_stage_dir(cfg, "dense") / "annotations.json", stage, "extract-regions"))
    regions = _load_regions(cfg, stage)
    cc = cfg.condition

    todo, skipped = [], []
    for r in regions:
        layout = dense.annotations_for(r["patch_image_id"])
        if not layout:
            skipped.append({"patch_id": r["patch_id"], "reason": "empty layout"})
            continue
        missing = sorted({a.category_id for a in layout} - {c for c, v in bank.items() if v})
        if missing:
            skipped.append({"patch_id": r["patch_id"], "reason": f"no prototypes for classes {missing}"})
            continue
        todo.append((r, layout))

    out = _reset(_stage_dir(cfg, "conditions"))

    def build(item) -> dict:
        r, layout = item
        bundle = build_bundle(r["patch_id"], layout, bank, dense.categories, tuple(r["size"]),
                              cfg.global_seed, cc.fourier_bands, cc.weight_w)
        write_bundle(out / r["patch_id"], bundle)
        return {"patch_id": r["patch_id"], "patch_image_id": r["patch_image_id"],
                "manifest": f"{r['patch_id']}/manifest.json", "n_objects": len(layout)}

    entries = parallel_map(build, todo, jobs)
    write_json(out / "index.json", {"bundles": entries, "skipped": skipped})
    if skipped:
        logger.warning("%d patches skipped while building conditions", len(skipped))
    return {"stage": stage, "n_bundles": len(entries), "n_skipped": len(skipped)}


# --- stage: generation -----------------------------------------------------------

def generate(cfg: PipelineConfig, jobs: int = 1) -> dict:
    stage = "generate"
    cond_dir = _stage_dir(cfg, "conditions")
    index = _read_json(_require(cond_dir / "index.json", stage, "build-conditions"))["bundles"]
    for e in index:
        _require(cond_dir / e["manifest"], stage, "build-conditions")
    gc = cfg.generator
    dense_dir = _stage_dir(cfg, "dense")
    if gc.mode == "builtin" and gc.background == "source":
        for e in index:
            _require(dense_dir / f"{e['patch_id']}.png", stage, "extract-regions")
    if isinstance(gc.background, ImageBackground):
        bg_path = cfg.resolve(gc.background.image)
        if not bg_path.exists():
            raise FileNotFound(f"file not found: {bg_path}")

    out = _reset(_stage_dir(cfg, "generated"))
    requests = [
        GenerationRequest(e["patch_id"], str((cond_dir / e["manifest"]).resolve()),
                          str((out / f"{e['patch_id']}.png").resolve()))
        for e in index
    ]

    if gc.mode == "builtin":
        def run_one(req: GenerationRequest) -> dict:
            bundle = read_bundle(Path(req.bundle_manifest))
            if gc.background == "source":
                bg = load_image(dense_dir / f"{req.patch_id}.png")
            elif isinstance(gc.background, ImageBackground):
                bg = str(cfg.resolve(gc.background.image))
            else:
                bg = gc.background
            img = run_builtin_compositor(bundle, bg, derive_seed(cfg.global_seed, "generate", req.patch_id),
                                         gc.noise_std)
            save_image(Path(req.output_path), img)
            return {"patch_id": req.patch_id, "status": "ok", "image_path": f"{req.patch_id}.png"}

        rows = parallel_map(run_one, requests, jobs)
    else:
        results = run_external(requests, gc.command, gc.parallelism, gc.timeout_s)
        rows = []
        for r in results:
            row = r.to_json()
            if r.ok:
                row["image_path"] = Path(r.image_path).name
            rows.append(row)

    write_jsonl(out / "requests.jsonl", [
        {"patch_id": e["patch_id"], "bundle_manifest": f"../conditions/{e['manifest']}",
         "output_path": f"{e['patch_id']}.png"}
        for e in index
    ])
    write_jsonl(out / "results.jsonl", rows)
    n_ok = sum(1 for r in rows if r["status"] == "ok")
    return {"stage": stage, "n_requests": len(rows), "n_ok": n_ok, "n_failed": len(rows) - n_ok}


# --- stage: refinement -----------------------------------------------------------

def _clamp_detections(dets: List[Detection], width: int, height: int):
    kept, dropped = [], 0
    for d in dets:
        b = clamp_box(d.bbox, width, height)
        if b is None:
            dropped += 1
        else:
            kept.append(Detection(d.image_id, b, d.category_id, d.score))
    return kept, dropped


def refine(cfg: PipelineConfig, jobs: int = 1) -> dict:
    stage = "refine"
    gen_dir = _stage_dir(cfg, "generated")
    rows = read_results(_require(gen_dir / "results.jsonl", stage, "generate"))
    dense = load_dataset(_require(_stage_dir(cfg, "dense") / "annotations.json", stage, "extract-regions"))
    regions = {r["patch_id"]: r for r in _load_regions(cfg, stage)}
    rc = cfg.refine
    ok = [pid for pid, row in rows.items() if row["status"] == "ok"]
    ok.sort(key=lambda pid: regions[pid]["patch_image_id"])
    for pid in ok:
        _require(gen_dir / rows[pid]["image_path"], stage, "generate")
    patch_images = {pid: dense.image(regions[pid]["patch_image_id"]) for pid in ok}

    by_patch: Dict[str, List[Detection]] = {}
    if rc.detections_path is not None:
        dets = load_detections(cfg.resolve(rc.detections_path))
        id_to_pid = {regions[pid]["patch_image_id"]: pid for pid in ok}
        for d in dets:
            if d.image_id in id_to_pid:
                by_patch.setdefault(id_to_pid[d.image_id], []).append(d)
    else:
        sc = rc.simulate
        noise = DetectorNoise(sc.miss_rate, sc.false_rate, sc.jitter_std_px, sc.score_mu, sc.score_sigma)
        for pid in ok:
            rec = patch_images[pid]
            sim = simulate_detections(dense.annotations_for(rec.id), noise,
                                      derive_seed(cfg.global_seed, "simulate", pid),
                                      (rec.width, rec.height), rec.id, sorted(dense.categories))
            by_patch[pid] = sim.detections
    n_clamp_dropped = 0
    for pid in ok:
        rec = patch_images[pid]
        by_patch[pid], n = _clamp_detections(by_patch.get(pid, []), rec.width, rec.height)
        n_clamp_dropped += n

    all_dets = [d for pid in ok for d in by_patch[pid]]
    if rc.model_detections_path is not None:
        model = fit_class_score_model(load_detections(cfg.resolve(rc.model_detections_path)))
    elif all_dets:
        model = fit_class_score_model(all_dets)
    else:
        model = ClassScoreModel({})
    rcfg = RefineConfig(rc.tau_ref, rc.alpha, rc.beta, rc.gamma)

    def run_one(pid: str):
        rec = patch_images[pid]
        return _refine(dense.annotations_for(rec.id), by_patch[pid], model, rcfg)

    outputs = parallel_map(run_one, ok, jobs)

    out = _reset(_stage_dir(cfg, "refined"))
    total = RefineReport()
    images, anns = [], []
    for pid, (labels, report) in zip(ok, outputs):
        rec = patch_images[pid]
        total = total + report
        images.append(ImageRecord(rec.id, rec.width, rec.height, f"../generated/{rows[pid]['image_path']}"))
        anns.extend(Annotation(rec.id, lab.bbox, lab.class_id) for lab in labels)
        write_json(out / "provenance" / f"{pid}.json", {
            "patch_id": pid,
            "patch_image_id": rec.id,
            "labels": [lab.to_json() for lab in labels],
            "report": report.to_json(),
        })
    total.check()
    write_dataset(out / "annotations.json", images, anns, dense.categories)
    write_json(out / "detections.json", detections_to_json(all_dets))
    write_json(out / "report.json", {
        "thresholds": {"tau_ref": rc.tau_ref, "alpha": rc.alpha, "beta": rc.beta, "gamma": rc.gamma},
        "detection_source": "file" if rc.detections_path else "simulated",
        "n_detections": len(all_dets),
        "n_detections_dropped_by_clamp": n_clamp_dropped,
        "totals": total.to_json(),
        "score_model": model.to_json(),
    })
    return {"stage": stage, "n_patches": len(ok), **total.to_json()}


# --- stage: merge ----------------------------------------------------------------

def merge(cfg: PipelineConfig, jobs: int = 1) -> dict:
    stage = "merge"
    refined = load_dataset(_require(_stage_dir(cfg, "refined") / "annotations.json", stage, "refine"))
    regions = {r["patch_image_id"]: r for r in _load_regions(cfg, stage)}
    _check_images_exist(refined, refined.images)
    patch_files = {regions[rec.id]["patch_id"]: refined.image_path(rec) for rec in refined.images}
    labels = {regions[rec.id]["patch_id"]: refined.annotations_for(rec.id) for rec in refined.images}
    mc = cfg.merge

    if mc.mode == MOSAIC:
        plans = plan_mosaic([(regions[rec.id]["patch_id"], (rec.width, rec.height)) for rec in refined.images],
                            tuple(mc.canvas))
        outputs = [(n + 1, f"images/mosaic_{n:04d}.png", None) for n in range(len(plans))]
        real = None
    else:
        real = load_dataset(cfg.resolve(cfg.paths.dataset))
        recs = [(regions[rec.id]["patch_id"], regions[rec.id]["source_image_id"],
                 tuple(regions[rec.id]["origin"]), (rec.width, rec.height)) for rec in refined.images]
        sizes = {im.id: (im.width, im.height) for im in real.images}
        plans = plan_paste_back(recs, sizes)
        _check_images_exist(real, [real.image(p.placements[0].source) for p in plans])
        outputs = [(p.placements[0].source, f"images/{p.placements[0].source}.png", p.placements[0].source)
                   for p in plans]

    out = _reset(_stage_dir(cfg, "merged"))

    def run_one(i: int):
        plan = plans[i]
        image_id, rel, source_id = outputs[i]
        patches = {p.patch_id: load_image(patch_files[p.patch_id]) for p in plan.placements}
        sources = src_anns = None
        if source_id is not None:
            sources = {source_id: load_image(real.image_path(real.image(source_id)))}
            src_anns = {source_id: real.annotations_for(source_id)}
        img, anns = execute_merge(plan, patches, sources, labels, src_anns, image_id)
        save_image(out / rel, img)
        return anns

    merged_anns = parallel_map(run_one, range(len(plans)), jobs)
    images = [ImageRecord(image_id, p.canvas_size[0], p.canvas_size[1], rel)
              for p, (image_id, rel, _) in zip(plans, outputs)]
    write_dataset(out / "annotations.json", images, [a for anns in merged_anns for a in anns],
                  refined.categories)
    write_json(out / "plan.json", {
        "mode": mc.mode,
        "plans": [{"output_image_id": image_id, "file_name": rel, **p.to_json()}
                  for p, (image_id, rel, _) in zip(plans, outputs)],
    })
    return {"stage": stage, "mode": mc.mode, "n_images": len(plans),
            "n_patches": len(refined.images), "n_annotations": sum(len(a) for a in merged_anns)}


# --- report ----------------------------------------------------------------------

def report(cfg: PipelineConfig, jobs: int = 1, timestamp: Optional[str] = None) -> dict:
    root = cfg.output_dir

    def maybe(rel: str):
        p = root / rel
        return _read_json(p) if p.exists() else None

    doc = {"generated_at": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")}
    proto = maybe("prototypes/summary.json")
    if proto:
        doc["prototypes"] = {c: {k: v for k, v in e.items()} for c, e in proto["classes"].items()}
    regions = maybe("dense/regions.json")
    if regions:
        per_image = Counter(r["source_image_id"] for r in regions["regions"])
        doc["focal_regions"] = {
            "n_patches": len(regions["regions"]),
            "n_source_images": len(per_image),
            "mean_regions_per_source_image": (len(regions["regions"]) / len(per_image)) if per_image else 0.0,
        }
    cond = maybe("conditions/index.json")
    if cond:
        doc["conditions"] = {"n_bundles": len(cond["bundles"]), "n_skipped": len(cond["skipped"])}
    if (root / "generated/results.jsonl").exists():
        rows = read_results(root / "generated/results.jsonl")
        n_ok = sum(1 for r in rows.values() if r["status"] == "ok")
        doc["generation"] = {"n_requests": len(rows), "n_ok": n_ok, "n_failed": len(rows) - n_ok}
    ref = maybe("refined/report.json")
    if ref:
        doc["refinement"] = ref["totals"]
    plan = maybe("merged/plan.json")
    if plan:
        n_patches = sum(len(p["placements"]) for p in plan["plans"])
        doc["merge"] = {"mode": plan["mode"], "n_images": len(plan["plans"]), "n_patches": n_patches,
                        "patches_per_image": (n_patches / len(plan["plans"])) if plan["plans"] else 0.0}
    write_json(root / "report.json", doc)
    return doc


STAGE_FUNCS = {
    "select-prototypes": select_prototypes,
    "extract-regions": extract_regions,
    "build-conditions": build_conditions,
    "generate": generate,
    "refine": refine,
    "merge": merge,
    "report": report,
}


def run_all(cfg: PipelineConfig, jobs: int = 1) -> dict:
    summaries = {name: STAGE_FUNCS[name](cfg, jobs) for name in STAGES}
    summaries["report"] = report(cfg, jobs)
    return summaries
