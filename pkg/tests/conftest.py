import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from migattn.scene import BBox, Instance, Scene

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60)
settings.load_profile("repo")


def random_scene(rng: np.random.Generator, max_canvas=16, max_n=8, max_ref=6, occupancy=False, min_n=0) -> Scene:
    cw, ch = (int(v) for v in rng.integers(1, max_canvas + 1, size=2))
    n = int(rng.integers(min_n, max_n + 1))
    instances = []
    for k in range(1, n + 1):
        w = int(rng.integers(1, cw + 1))
        h = int(rng.integers(1, ch + 1))
        x = int(rng.integers(0, cw - w + 1))
        y = int(rng.integers(0, ch - h + 1))
        occ = None
        if occupancy and rng.random() < 0.5:
            occ = rng.random((h, w)) < 0.7
            occ[rng.integers(h), rng.integers(w)] = True
        rw, rh = (int(v) for v in rng.integers(1, max_ref + 1, size=2))
        instances.append(Instance(k, BBox(x, y, w, h), rw, rh, occ))
    return Scene(cw, ch, int(rng.integers(1, 5)), tuple(instances))


def capped_scene(rng, max_len=300, **kw) -> Scene:
    """Random scene whose token sequence is at most ``max_len`` long."""
    while True:
        s = random_scene(rng, **kw)
        total = s.text_len + 2 * s.canvas_area + sum(i.ref_w * i.ref_h for i in s.instances)
        if total <= max_len:
            return s


@st.composite
def boxes(draw, max_coord=12, max_extent=8):
    return BBox(
        draw(st.integers(0, max_coord)),
        draw(st.integers(0, max_coord)),
        draw(st.integers(1, max_extent)),
        draw(st.integers(1, max_extent)),
    )


@st.composite
def scenes(draw, max_canvas=16, max_n=8):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_scene(np.random.default_rng(seed), max_canvas=max_canvas, max_n=max_n)


# -- brute-force oracles shared by the unit and acceptance suites ------------


def linear_tokens(scene: Scene):
    """Reconstruct the token sequence as (role, ref, i, j) tuples by plain loops."""
    out = [("text", 0, 0, 0) for _ in range(scene.text_len)]
    for role in ("noise_image", "layout"):
        for j in range(scene.canvas_h):
            for i in range(scene.canvas_w):
                out.append((role, 0, i, j))
    for inst in scene.instances:
        for j in range(inst.ref_h):
            for i in range(inst.ref_w):
                out.append(("ref", inst.id, i, j))
    return out


def mask_oracle(scene: Scene, kind: str) -> np.ndarray:
    """Evaluate the CLA / ICA set-builder definitions row by row.

    ICA: an in-box noise query with box set S may see text, noise tokens in
    any B_n with n in S, and R_n for n in S.  Every other row is the CLA row.
    """
    toks = linear_tokens(scene)
    T = {k for k, t in enumerate(toks) if t[0] == "text"}
    I = {k for k, t in enumerate(toks) if t[0] == "noise_image"}
    L = {k for k, t in enumerate(toks) if t[0] == "layout"}
    R = {n: {k for k, t in enumerate(toks) if t[0] == "ref" and t[1] == n} for n in range(1, len(scene.instances) + 1)}
    B = {
        inst.id: {k for k in I if inst.bbox.contains(toks[k][2], toks[k][3])}
        for inst in scene.instances
    }
    ctx = T | I | L
    out = np.zeros((len(toks), len(toks)), dtype=bool)
    for q, tok in enumerate(toks):
        if q in ctx:
            allowed = ctx
        else:
            allowed = T | R[tok[1]]
        if kind == "ICA" and q in I:
            S = [n for n in B if q in B[n]]
            if S:
                allowed = set(T)
                for n in S:
                    allowed |= B[n] | R[n]
        out[q, sorted(allowed)] = True
    return out


def subset_softmax_attention(q, k, v, mask, rq, rk):
    """Per-row explicit softmax over the allowed key subset (python floats).

    ``rq``/``rk`` are the already rotated queries/keys, shape (n, d).
    """
    import math

    n, d = rq.shape
    out = np.zeros_like(v)
    weights = np.zeros((n, n))
    for a in range(n):
        keys = [b for b in range(n) if mask[a, b]]
        s = [sum(float(rq[a, t]) * float(rk[b, t]) for t in range(d)) / math.sqrt(d) for b in keys]
        top = max(s)
        e = [math.exp(x - top) for x in s]
        z = math.fsum(e)
        for b, eb in zip(keys, e):
            weights[a, b] = eb / z
            out[a] += (eb / z) * v[b]
    return out, weights


def rotate_oracle(x, index, split, theta=10000.0):
    """Rotate one vector pair by pair using explicit trig."""
    import math

    x = np.asarray(x, dtype=float)
    y = x.copy()
    offset = 0
    for axis, d in enumerate(split):
        for t in range(d // 2):
            ang = index[axis] * theta ** (-2.0 * t / d)
            a, b = x[offset + 2 * t], x[offset + 2 * t + 1]
            y[offset + 2 * t] = a * math.cos(ang) - b * math.sin(ang)
            y[offset + 2 * t + 1] = a * math.sin(ang) + b * math.cos(ang)
        offset += d
    return y


def repaint_oracle(scene: Scene, order) -> list[list[int]]:
    grid = [[0] * scene.canvas_w for _ in range(scene.canvas_h)]
    for j in range(scene.canvas_h):
        for i in range(scene.canvas_w):
            for inst_id in order:
                inst = scene.instances[inst_id - 1]
                b = inst.bbox
                if b.contains(i, j):
                    occ = inst.occupancy
                    if occ is None or occ[j - b.y, i - b.x]:
                        grid[j][i] = inst_id
    return grid


def cells(inst: Instance) -> set:
    b = inst.bbox
    return {
        (i, j)
        for j in range(b.y, b.y + b.h)
        for i in range(b.x, b.x + b.w)
        if inst.occupancy is None or inst.occupancy[j - b.y, i - b.x]
    }


def box_cells(b: BBox) -> set:
    return {(i, j) for i in range(b.x, b.x + b.w) for j in range(b.y, b.y + b.h)}


@pytest.fixture
def rng():
    return np.random.default_rng(20241015)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
SUITE_BUDGET_S = 300.0
_session_start = [0.0]


@pytest.fixture
def record():
    def _record(number: int, name: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = (name, bool(passed), detail)

    return _record


def pytest_sessionstart(session):
    import time

    _session_start[0] = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import time

    if not ACCEPTANCE:
        return
    elapsed = time.perf_counter() - _session_start[0]
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {name}: {detail}")
    ok = elapsed < SUITE_BUDGET_S
    tr.write_line(f"[{'PASS' if ok else 'FAIL'}] 10b. full suite wall time: {elapsed:.1f} s (< {SUITE_BUDGET_S:.0f} s)")


def pytest_sessionfinish(session, exitstatus):
    import time

    if ACCEPTANCE and time.perf_counter() - _session_start[0] >= SUITE_BUDGET_S:
        session.exitstatus = 1
