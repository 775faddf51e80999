import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import best_two_partition, brute_force_window
from aerialsynth.errors import WindowLargerThanImage, WindowOutOfBounds
from aerialsynth.focal import FocalRegion, crop_region, extract_focal_regions, kmeans, paste_region, place_window
from aerialsynth.geometry import Annotation, BBox, Dataset, ImageRecord, contains


def test_kmeans_k1_is_centroid():
    pts = [(0.0, 0.0), (2.0, 0.0), (4.0, 6.0)]
    r = kmeans(pts, 1)
    assert r.centers[0] == pytest.approx((2.0, 2.0))
    assert r.assignment == [0, 0, 0]


def test_kmeans_identical_points_zero_inertia():
    r = kmeans([(3.0, 3.0)] * 5, 3, seed=1)
    assert r.inertia == 0.0


def test_kmeans_k_lowered(caplog):
    r = kmeans([(0.0, 0.0), (1.0, 1.0)], 5)
    assert len(r.centers) == 2
    assert "lowering k" in caplog.text


def test_kmeans_two_blobs_match_exhaustive():
    pts = [(0, 0), (1, 0), (0, 1), (50, 50), (51, 50), (50, 52)]
    r = kmeans(pts, 2, seed=3)
    cost, labels = best_two_partition(pts)
    assign = np.array(r.assignment)
    assert r.inertia == pytest.approx(cost)
    assert (assign == labels).all() or (assign == 1 - labels).all()
    means = sorted(tuple(np.mean([p for p, a in zip(pts, assign) if a == g], axis=0)) for g in (0, 1))
    assert sorted(r.centers) == pytest.approx(means)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 40))
def test_kmeans_invariants(seed, k, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 100, (n, 2))
    if seed % 3 == 0:
        pts = np.round(pts / 25) * 25  # many duplicates
    r = kmeans([tuple(p) for p in pts], k, seed=seed)
    assert len(r.assignment) == n
    hist = r.inertia_history
    assert all(b <= a * (1 + 1e-12) + 1e-9 for a, b in zip(hist, hist[1:]))
    c = np.array(r.centers)
    recomputed = float(((pts - c[r.assignment]) ** 2).sum())
    assert r.inertia == pytest.approx(recomputed, rel=1e-9, abs=1e-9)
    d = ((pts[:, None] - c[None]) ** 2).sum(axis=2)
    assert np.all(d[np.arange(n), r.assignment] <= d.min(axis=1) + 1e-9)


def test_place_window_examples():
    w, c = place_window((5, 5), [BBox(0, 0, 10, 10)], 256, (512, 512))
    assert (w.x, w.y, w.w, w.h, c) == (0, 0, 256, 256, 1)
    w, c = place_window((150, 150), [BBox(0, 0, 300, 300)], 256, (512, 512))
    assert c == 0 and w.x <= 150 <= w.x2 and w.y <= 150 <= w.y2
    with pytest.raises(WindowLargerThanImage):
        place_window((5, 5), [], 256, (200, 512))


def _random_instance(rng):
    size = int(rng.integers(16, 64))
    W, H = int(rng.integers(size, 140)), int(rng.integers(size, 140))
    boxes = []
    for _ in range(int(rng.integers(0, 12))):
        bw, bh = float(rng.uniform(1, size * 1.2)), float(rng.uniform(1, size * 1.2))
        bw, bh = min(bw, W), min(bh, H)
        x, y = float(rng.uniform(0, W - bw)), float(rng.uniform(0, H - bh))
        if rng.random() < 0.3:
            x, y = float(round(x)), float(round(y))
        boxes.append(BBox(x, y, bw, bh))
    m = (float(rng.uniform(0, W)), float(rng.uniform(0, H)))
    return m, boxes, size, (W, H)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_place_window_equals_brute_force(seed):
    m, boxes, size, image = _random_instance(np.random.default_rng(seed))
    win, count = place_window(m, boxes, size, image)
    best, bx, by = brute_force_window(m, boxes, size, image)
    assert count == best
    assert (win.x, win.y) == (bx, by)
    assert win.x <= m[0] <= win.x2 and win.y <= m[1] <= win.y2
    assert 0 <= win.x and win.x2 <= image[0] and 0 <= win.y and win.y2 <= image[1]
    assert win.x == int(win.x) and win.y == int(win.y)


def _dataset(anns, size=(300, 200)):
    return Dataset([ImageRecord(1, size[0], size[1], "a.png"), ImageRecord(2, 50, 50, "b.png")],
                   anns, {1: "car"})


def test_extract_regions_examples(caplog):
    assert extract_focal_regions(_dataset([]), size=64) == []
    regions = extract_focal_regions(_dataset([Annotation(1, BBox(100, 100, 10, 10), 1)]), size=64)
    assert len(regions) == 1 and len(regions[0].contained) == 1
    small = [Annotation(2, BBox(1, 1, 5, 5), 1)]
    assert extract_focal_regions(_dataset(small), size=64) == []
    assert "smaller than window" in caplog.text


def test_extract_regions_invariants_and_determinism():
    rng = np.random.default_rng(5)
    anns = [Annotation(1, BBox(float(rng.uniform(0, 280)), float(rng.uniform(0, 180)), 8.0, 8.0), 1)
            for _ in range(40)]
    ds = _dataset(anns)
    a = extract_focal_regions(ds, k_default=4, size=64, seed=9)
    b = extract_focal_regions(ds, k_default=4, size=64, seed=9, jobs=4)
    assert [(r.window, len(r.contained)) for r in a] == [(r.window, len(r.contained)) for r in b]
    assert len({(r.image_id, r.window.x, r.window.y) for r in a}) == len(a)
    for r in a:
        assert 0 <= r.window.x and r.window.x2 <= 300 and 0 <= r.window.y and r.window.y2 <= 200
        n_full = sum(contains(r.window, x.bbox) for x in anns)
        assert len(r.contained) == n_full
        for c in r.contained:
            assert 0 <= c.bbox.x and c.bbox.x2 <= 64 and 0 <= c.bbox.y and c.bbox.y2 <= 64


def test_keep_clipped_visibility():
    anns = [Annotation(1, BBox(10, 10, 8, 8), 1), Annotation(1, BBox(70, 10, 8, 8), 1)]
    ds = _dataset(anns)
    base = extract_focal_regions(ds, k_default=1, size=64, seed=0)
    loose = extract_focal_regions(ds, k_default=1, size=64, seed=0, keep_clipped_min_visibility=0.0)
    assert len(loose[0].contained) >= len(base[0].contained)
    for c in loose[0].contained:
        assert c.bbox.x2 <= 64 and c.bbox.y2 <= 64


def test_crop_examples():
    img = np.arange(16, dtype=np.uint8).reshape(4, 4)
    full = FocalRegion(1, 0, BBox(0, 0, 4, 4), [], (2, 2))
    assert np.array_equal(crop_region(img, full), img)
    tl = FocalRegion(1, 0, BBox(0, 0, 2, 2), [], (1, 1))
    assert crop_region(img, tl).tolist() == [[0, 1], [4, 5]]
    mid = FocalRegion(1, 0, BBox(1, 2, 2, 2), [], (2, 3))
    patch = crop_region(img, mid)
    assert np.array_equal(paste_region(np.zeros_like(img), patch, mid.origin)[2:4, 1:3], patch)
    assert np.array_equal(paste_region(img, patch, mid.origin), img)
    with pytest.raises(WindowOutOfBounds):
        crop_region(img, FocalRegion(1, 0, BBox(3, 3, 2, 2), [], (3, 3)))
