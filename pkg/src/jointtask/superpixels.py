"""SLIC over-segmentation and the box-perimeter boundary statistic."""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

DEFAULT_SEGMENTS = 200
DEFAULT_COMPACTNESS = 10.0
DEFAULT_ITERATIONS = 10
DEFAULT_SAMPLES = 200


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray
    boundary: np.ndarray
    segment_count: int


def boundary_map(labels: np.ndarray) -> np.ndarray:
    """True where a 4-neighbour carries a different label, or on the image border."""
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    b[0, :] = b[-1, :] = True
    b[:, 0] = b[:, -1] = True
    return b


def _grid_centers(h: int, w: int, k: int):
    step = np.sqrt(h * w / k)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.ravel(), xx.ravel(), step


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Merge orphan fragments and undersized segments into their largest neighbour."""
    four = ndimage.generate_binary_structure(2, 1)
    comp = np.zeros_like(labels)
    n = 0
    for lab in np.unique(labels):
        cc, k = ndimage.label(labels == lab, structure=four)
        comp[cc > 0] = cc[cc > 0] + n - 1
        n += k
    size = np.bincount(comp.ravel(), minlength=n).tolist()
    adj = [set() for _ in range(n)]
    for a, b in ((comp[1:, :], comp[:-1, :]), (comp[:, 1:], comp[:, :-1])):
        diff = a != b
        for u, v in set(zip(a[diff].tolist(), b[diff].tolist())):
            adj[u].add(v)
            adj[v].add(u)
    parent = list(range(n))
    members = [[i] for i in range(n)]

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    heap = [(size[i], i) for i in range(n) if size[i] < min_size]
    heapq.heapify(heap)
    while heap:
        sz, r = heapq.heappop(heap)
        if parent[r] != r or sz != size[r]:
            continue
        neigh = {find(a) for m in members[r] for a in adj[m]} - {r}
        if not neigh:
            continue
        t = max(neigh, key=lambda j: (size[j], -j))
        parent[r] = t
        size[t] += size[r]
        members[t].extend(members[r])
        if size[t] < min_size:
            heapq.heappush(heap, (size[t], t))
    roots = np.array([find(i) for i in range(n)])
    _, relabel = np.unique(roots[comp], return_inverse=True)
    return relabel.reshape(labels.shape)


def slic(image: np.ndarray, target_segments: int = DEFAULT_SEGMENTS,
         compactness: float = DEFAULT_COMPACTNESS, iterations: int = DEFAULT_ITERATIONS,
         min_size_factor: float = 0.25) -> SuperpixelMap:
    """k-means in (L, a, b, x, y) with grid seeds and a 2S x 2S search window.

    Deterministic: seeds come from a regular grid and no RNG is involved.
    """
    h, w = image.shape[:2]
    if target_segments < 1:
        raise ValueError("target_segments must be >= 1")
    if target_segments > h * w:
        raise ValueError(f"target_segments={target_segments} exceeds pixel count {h * w}")
    if compactness <= 0:
        raise ValueError("compactness must be positive")
    lab = rgb2lab(np.clip(image, 0, 1)).reshape(-1, 3)
    cy, cx, step = _grid_centers(h, w, target_segments)
    pix = np.clip(np.floor(cy).astype(int), 0, h - 1) * w + np.clip(np.floor(cx).astype(int), 0, w - 1)
    centers = np.column_stack([lab[pix], cy, cx])
    ys, xs = np.divmod(np.arange(h * w), w)
    pos = np.column_stack([ys + 0.5, xs + 0.5])
    r = int(np.ceil(step))
    off = np.arange(-r, r + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    oy, ox = oy.ravel(), ox.ravel()
    spatial_w = (compactness / step) ** 2
    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(iterations):
        iy = np.floor(centers[:, 3:4]).astype(int) + oy
        ix = np.floor(centers[:, 4:5]).astype(int) + ox
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        flat = np.where(valid, np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1), 0)
        dc = ((lab[flat] - centers[:, None, :3]) ** 2).sum(-1)
        ds = ((pos[flat] - centers[:, None, 3:]) ** 2).sum(-1)
        dist = np.where(valid, dc + ds * spatial_w, np.inf).ravel()
        owner = np.repeat(np.arange(len(centers)), flat.shape[1])
        flat = flat.ravel()
        order = np.lexsort((owner, dist))
        first_pix, first_idx = np.unique(flat[order], return_index=True)
        best = np.full(h * w, -1, dtype=np.int64)
        sel = order[first_idx]
        ok = np.isfinite(dist[sel])
        best[first_pix[ok]] = owner[sel][ok]
        missing = best < 0
        if np.any(missing):
            d2 = ((pos[missing][:, None, :] - centers[None, :, 3:]) ** 2).sum(-1)
            best[missing] = d2.argmin(axis=1)
        labels = best
        counts = np.bincount(labels, minlength=len(centers)).astype(float)
        feats = np.column_stack([lab, pos])
        sums = np.zeros((len(centers), 5))
        np.add.at(sums, labels, feats)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
    min_size = max(1, int(min_size_factor * h * w / target_segments))
    labels = _enforce_connectivity(labels.reshape(h, w), min_size)
    return SuperpixelMap(labels, boundary_map(labels), int(labels.max()) + 1)


def perimeter_points(px_box, c: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """``c`` equidistant perimeter pixels of ``(..., 4)`` pixel boxes.

    The walk runs through pixel centres, starting at the top-left corner and
    going clockwise (top edge, right edge, bottom edge, left edge).  Returns
    integer ``(rows, cols)`` arrays of shape ``(..., c)``.
    """
    b = np.asarray(px_box, dtype=np.float64)
    x0 = b[..., 0] + 0.5
    y0 = b[..., 1] + 0.5
    x1 = np.maximum(b[..., 2] - 0.5, x0)
    y1 = np.maximum(b[..., 3] - 0.5, y0)
    bw, bh = x1 - x0, y1 - y0
    per = 2 * (bw + bh)
    t = per[..., None] * np.arange(c) / c
    bw_, bh_ = bw[..., None], bh[..., None]
    x0_, y0_, x1_, y1_ = x0[..., None], y0[..., None], x1[..., None], y1[..., None]
    s1 = t < bw_
    s2 = ~s1 & (t < bw_ + bh_)
    s3 = ~s1 & ~s2 & (t < 2 * bw_ + bh_)
    s4 = ~(s1 | s2 | s3)
    xs = np.select([s1, s2, s3, s4],
                   [x0_ + t, x1_, x1_ - (t - bw_ - bh_), x0_])
    ys = np.select([s1, s2, s3, s4],
                   [y0_, y0_ + (t - bw_), y1_, y1_ - (t - 2 * bw_ - bh_)])
    cols = np.clip(np.floor(xs).astype(np.intp), 0, width - 1)
    rows = np.clip(np.floor(ys).astype(np.intp), 0, height - 1)
    return rows, cols


def boundary_fraction(spmap: SuperpixelMap, px_box, c: int = DEFAULT_SAMPLES):
    """Mean of the boundary indicator over ``c`` perimeter samples.

    ``px_box`` may be a single box or a stack of boxes in source-pixel coordinates.
    """
    if c < 4:
        raise ValueError("need at least 4 perimeter samples")
    h, w = spmap.boundary.shape
    rows, cols = perimeter_points(px_box, c, h, w)
    return spmap.boundary[rows, cols].mean(axis=-1)


# -- on-disk cache -----------------------------------------------------------

def image_key(image: np.ndarray, target_segments: int, compactness: float) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype=np.float64).tobytes())
    h.update(f"{image.shape}|{target_segments}|{compactness}".encode())
    return h.hexdigest()[:24]


def write_pgm16(path, labels: np.ndarray):
    if labels.max() > 65535:
        raise ValueError("too many labels for a 16-bit PGM")
    hgt, wid = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{wid} {hgt}\n65535\n".encode())
        fh.write(labels.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    wid, hgt, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dt = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dt, count=wid * hgt).reshape(hgt, wid).astype(np.int64)


def cached_slic(image: np.ndarray, cache_dir=None, target_segments: int = DEFAULT_SEGMENTS,
                compactness: float = DEFAULT_COMPACTNESS) -> SuperpixelMap:
    """``slic`` with an optional per-image disk cache keyed by content hash."""
    if cache_dir is None:
        return slic(image, target_segments, compactness)
    cache_dir = Path(cache_dir)
    key = image_key(image, target_segments, compactness)
    pgm = cache_dir / f"{key}.pgm"
    side = cache_dir / f"{key}.json"
    if pgm.exists() and side.exists():
        labels = read_pgm16(pgm)
        return SuperpixelMap(labels, boundary_map(labels), int(labels.max()) + 1)
    sp = slic(image, target_segments, compactness)
    cache_dir.mkdir(parents=True, exist_ok=True)
    write_pgm16(pgm, sp.labels)
    side.write_text(json.dumps({"key": key, "shape": list(sp.labels.shape),
                                "target_segments": target_segments,
                                "compactness": compactness,
                                "segment_count": sp.segment_count}))
    return sp
