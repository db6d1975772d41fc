"""Shared property checks: gradient oracles and their randomized drivers.

These run both under pytest and from the CLI selftest subcommand, so they
return structured results instead of asserting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ifm.numerics import (
    Array,
    GradientTape,
    add,
    add_rows,
    concat,
    cross_entropy_logits,
    embedding,
    gather_rows,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    mse,
    multiply,
    parameter,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
    split,
    subtract,
    transpose,
    weighted_sum,
)
from ifm.numerics.random import RngStream


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def __str__(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}" + (f": {self.detail}" if self.detail else "")


def finite_difference_gradients(
    fn: Callable[[], Array],
    params: Sequence[Array],
    h: float = 1e-3,
    max_coords: int | None = None,
    rng: RngStream | None = None,
) -> list[np.ndarray]:
    """Central-difference gradients of a scalar-valued closure.

    The closure re-reads each parameter's .data, so we temporarily swap in
    float64 copies and probe coordinate by coordinate. Returns one gradient
    array per parameter (NaN at unprobed coordinates when sampling).
    """
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        grads = []
        for p in params:
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                assert rng is not None
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            g = np.full(n, np.nan)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                f_plus = fn().item()
                flat[c] = orig - h
                f_minus = fn().item()
                flat[c] = orig
                g[c] = (f_plus - f_minus) / (2.0 * h)
            grads.append(g.reshape(p.data.shape))
        return grads
    finally:
        for p, s in zip(params, saved):
            p.data = s


def gradient_check(
    name: str,
    fn: Callable[[], Array],
    params: Sequence[Array],
    rel_tol: float = 1e-2,
    abs_floor: float = 1e-4,
    max_coords: int | None = None,
    rng: RngStream | None = None,
) -> CheckResult:
    """Compare tape gradients against the finite-difference oracle."""
    for p in params:
        p.grad = None
    with GradientTape() as tape:
        loss = fn()
    tape.gradients(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            return CheckResult(name, False, "no gradient reached a leaf")
        analytic.append(p.grad.copy())
    numeric = finite_difference_gradients(fn, params, max_coords=max_coords, rng=rng)
    worst = 0.0
    for a, nvals in zip(analytic, numeric):
        sel = ~np.isnan(nvals)
        denom = np.maximum(np.maximum(np.abs(a[sel]), np.abs(nvals[sel])), abs_floor)
        rel = np.abs(a[sel] - nvals[sel]) / denom
        if rel.size:
            worst = max(worst, float(rel.max()))
    ok = worst <= rel_tol
    return CheckResult(name, ok, f"max rel err {worst:.2e}")


def _scalarize(out: Array, rng: RngStream) -> Array:
    w = rng.normal(out.shape)
    return reduce_sum(multiply(out, Array(w)))


def check_primitive_gradients(cases_per_op: int = 20, seed: int = 101) -> list[CheckResult]:
    """Randomized finite-difference checks over every primitive op."""
    root = RngStream(seed)
    results: list[CheckResult] = []

    def run(op_name: str, case_fn: Callable[[RngStream, int], CheckResult]):
        for i in range(cases_per_op):
            results.append(case_fn(root.child(f"{op_name}-{i}"), i))

    def dims(rng, lo=1, hi=4):
        return int(rng.integers(lo, hi + 1))

    def case_matmul(rng, i):
        m, k, n = dims(rng), dims(rng), dims(rng)
        if i % 3 == 0:
            a = parameter(rng.normal((2, m, k)))
            b = parameter(rng.normal((2, k, n)))
        else:
            a = parameter(rng.normal((m, k)))
            b = parameter(rng.normal((k, n)))
        return gradient_check(f"matmul[{i}]", lambda: _scalarize(matmul(a, b), rng.child("w")), [a, b])

    def case_elementwise(op, op_name):
        def case(rng, i):
            m, n = dims(rng), dims(rng)
            a = parameter(rng.normal((m, n)))
            b = parameter(rng.normal((n,) if i % 2 else (m, n)))
            return gradient_check(f"{op_name}[{i}]", lambda: _scalarize(op(a, b), rng.child("w")), [a, b])

        return case

    def case_scale(rng, i):
        a = parameter(rng.normal((dims(rng), dims(rng))))
        s = float(rng.normal(()) * 2)
        return gradient_check(f"scale[{i}]", lambda: _scalarize(scale(a, s), rng.child("w")), [a])

    def case_softmax(rng, i):
        a = parameter(rng.normal((dims(rng), dims(rng, 2, 5))))
        return gradient_check(f"softmax[{i}]", lambda: _scalarize(softmax(a), rng.child("w")), [a])

    def case_masked_softmax(rng, i):
        n, v = dims(rng, 2, 4), dims(rng, 2, 5)
        a = parameter(rng.normal((n, v)))
        mask = rng.uniform((n, v)) < 0.6
        mask[:, 0] = True
        return gradient_check(
            f"masked_softmax[{i}]", lambda: _scalarize(masked_softmax(a, mask), rng.child("w")), [a]
        )

    def case_layer_norm(rng, i):
        n, d = dims(rng), dims(rng, 2, 6)
        x = parameter(rng.normal((n, d)))
        g = parameter(rng.normal((d,)) * 0.5 + 1.0)
        b = parameter(rng.normal((d,)) * 0.1)
        return gradient_check(
            f"layer_norm[{i}]", lambda: _scalarize(layer_norm(x, g, b), rng.child("w")), [x, g, b]
        )

    def case_gelu(rng, i):
        a = parameter(rng.normal((dims(rng), dims(rng))) * 2)
        return gradient_check(f"gelu[{i}]", lambda: _scalarize(gelu(a), rng.child("w")), [a])

    def case_embedding(rng, i):
        v, d, n = dims(rng, 3, 6), dims(rng, 2, 4), dims(rng, 1, 5)
        table = parameter(rng.normal((v, d)))
        ids = rng.integers(0, v, (n,))
        return gradient_check(
            f"embedding[{i}]", lambda: _scalarize(embedding(table, ids), rng.child("w")), [table]
        )

    def case_concat_split(rng, i):
        d = dims(rng, 2, 4)
        a = parameter(rng.normal((dims(rng), d)))
        b = parameter(rng.normal((dims(rng), d)))

        def fn():
            joined = concat([a, b], axis=0)
            pieces = split(joined, [a.shape[0], b.shape[0]], axis=0)
            return add(_scalarize(pieces[0], rng.child("w0")), _scalarize(pieces[1], rng.child("w1")))

        return gradient_check(f"concat_split[{i}]", fn, [a, b])

    def case_reductions(rng, i):
        a = parameter(rng.normal((dims(rng), dims(rng))))
        fn = (lambda: reduce_mean(a)) if i % 2 else (lambda: reduce_sum(a))
        return gradient_check(f"reduce[{i}]", fn, [a])

    def case_mse(rng, i):
        shape = (dims(rng), dims(rng))
        pred = parameter(rng.normal(shape))
        target = Array(rng.normal(shape))
        return gradient_check(f"mse[{i}]", lambda: mse(pred, target), [pred])

    def case_cross_entropy(rng, i):
        n, v = dims(rng, 1, 4), dims(rng, 2, 6)
        logits = parameter(rng.normal((n, v)))
        targets = rng.integers(0, v, (n,))
        w = rng.uniform((n,)) + 0.5
        return gradient_check(
            f"cross_entropy[{i}]",
            lambda: weighted_sum(cross_entropy_logits(logits, targets), w.astype(np.float64)),
            [logits],
        )

    def case_shapes(rng, i):
        m, n = dims(rng, 2, 4), dims(rng, 2, 4)
        a = parameter(rng.normal((m, n)))

        def fn():
            r = reshape(a, (n, m))
            t = transpose(r, (1, 0))
            idx = rng.child("idx").integers(0, m, (3,))
            return _scalarize(gather_rows(t, idx), rng.child("w"))

        return gradient_check(f"reshape_transpose_gather[{i}]", fn, [a])

    def case_add_rows(rng, i):
        n, d = dims(rng, 3, 5), dims(rng, 2, 4)
        base = parameter(rng.normal((n, d)))
        k = dims(rng, 1, 3)
        rows = parameter(rng.normal((k, d)))
        idx = rng.choice(n, size=k, replace=False)
        return gradient_check(
            f"add_rows[{i}]", lambda: _scalarize(add_rows(base, rows, idx), rng.child("w")), [base, rows]
        )

    run("matmul", case_matmul)
    run("add", case_elementwise(add, "add"))
    run("subtract", case_elementwise(subtract, "subtract"))
    run("multiply", case_elementwise(multiply, "multiply"))
    run("scale", case_scale)
    run("softmax", case_softmax)
    run("masked_softmax", case_masked_softmax)
    run("layer_norm", case_layer_norm)
    run("gelu", case_gelu)
    run("embedding", case_embedding)
    run("concat_split", case_concat_split)
    run("reduce", case_reductions)
    run("mse", case_mse)
    run("cross_entropy", case_cross_entropy)
    run("reshape_transpose_gather", case_shapes)
    run("add_rows", case_add_rows)
    return results


# -- tiny end-to-end fixtures ---------------------------------------------------------


def tiny_model(seed: int = 0, **overrides):
    """A small model whose full layout stays around 40 rows."""
    from ifm.encoding import Vocabulary
    from ifm.mot import Model, MoTConfig

    vocab = Vocabulary()
    kwargs = dict(
        width=16, layers=2, heads=2, max_len=64, tau_dim=8,
        vocab_size=len(vocab), image_side=4, patch=2,
    )
    kwargs.update(overrides)
    return Model(MoTConfig(**kwargs), vocab, seed=seed)


def tiny_training_slice(model, rng: RngStream, instr_words=6, subtask_words=3, horizon: int = 8):
    """Random-content sample matching a model's toy dimensions."""
    from ifm.encoding import Vocabulary
    from ifm.sequence import TrainingSlice

    side = model.cfg.image_side
    vocab_size = model.cfg.vocab_size
    instr = [1] + list(rng.integers(4, vocab_size, (instr_words,))) + [2]
    sub = [1] + list(rng.integers(4, vocab_size, (subtask_words,))) + [2]
    return TrainingSlice(
        instruction=[int(i) for i in instr],
        context_image=rng.uniform((side, side, 3), -1, 1),
        subtask=[int(i) for i in sub],
        keyframe_image=rng.uniform((side, side, 3), -1, 1),
        proprio=rng.uniform((3,), -1, 1),
        actions=rng.uniform((horizon, 3), -1, 1),
    )


# -- attention-mask leakage -------------------------------------------------------------


def transitive_reach(mask: np.ndarray) -> np.ndarray:
    """Boolean closure of the attends-to relation (row -> reachable columns)."""
    reach = mask.copy()
    while True:
        step = reach @ mask  # boolean matmul
        merged = reach | step
        if np.array_equal(merged, reach):
            return reach
        reach = merged


def check_mask_leakage(seed: int = 3, schemes=("complete", "joint", "single")) -> list[CheckResult]:
    """Perturb every masked-out row; protected outputs must be bitwise equal.

    Protected pairs (p, q) are derived mechanically: q must not be reachable
    from p through any chain of allowed attention edges, so the check holds
    for any network depth.
    """
    import dataclasses

    from ifm.numerics import Array
    from ifm.sequence import build_training_sequence

    results = []
    model = tiny_model(seed)
    rng = RngStream(seed)
    for scheme in schemes:
        sample = tiny_training_slice(model, rng.child(f"slice-{scheme}"))
        packed = build_training_sequence(model.encoders, sample, scheme, "rfg", rng.child(f"seq-{scheme}"))
        n = packed.n_rows
        base = model.forward_full(packed).data
        reach = transitive_reach(packed.mask)
        worst = None
        for q in range(n):
            rows = packed.rows.data.copy()
            rows[q] += rng.child(f"perturb-{scheme}-{q}").normal((rows.shape[1],), sigma=2.0)
            out = model.forward_full(dataclasses.replace(packed, rows=Array(rows))).data
            protected = np.where(~reach[:, q])[0]
            if protected.size and not np.array_equal(out[protected], base[protected]):
                worst = (q, int(protected[0]))
                break
        ok = worst is None
        detail = f"{n} rows exhaustively perturbed" if ok else f"leak from row {worst[0]} into protected row {worst[1]}"
        results.append(CheckResult(f"mask-leakage[{scheme}]", ok, detail))
    return results


# -- KV-cache fidelity ---------------------------------------------------------------


def check_cache_equivalence(n_layouts: int = 50, seed: int = 11, tolerance: float = 1e-5) -> CheckResult:
    """Cached incremental forwards must match the uncached forward, including
    the async pattern that truncates and re-appends a fresh proprio row."""
    import dataclasses

    from ifm.numerics import Array
    from ifm.sequence import SegmentKind, build_training_sequence

    model = tiny_model(seed)
    root = RngStream(seed)
    worst = 0.0
    for case in range(n_layouts):
        rng = root.child(f"layout{case}")
        scheme = ("single", "joint", "complete")[case % 3]
        sample = tiny_training_slice(
            model,
            rng.child("content"),
            instr_words=int(rng.integers(2, 9)),
            subtask_words=int(rng.integers(1, 5)),
            horizon=int(rng.integers(1, 9)),
        )
        packed = build_training_sequence(model.encoders, sample, scheme, "rfg", rng.child("seq"))
        full = model.forward_full(packed).data

        cache = model.new_cache(scheme)
        outs = []
        row = 0
        groups: list[list[int]] = [[]]
        for i in range(len(packed.segments)):
            groups[-1].append(i)
            if i + 1 < len(packed.segments) and rng.uniform(()) < 0.5:
                groups.append([])
        for gi, group in enumerate(groups):
            slices = [packed.segments[i] for i in group]
            contents = []
            for s in slices:
                contents.append(Array(packed.rows.data[row : row + s.length]))
                row += s.length
            commit = gi + 1 < len(groups)
            outs.append(model.extend(cache, slices, contents, commit=commit).data)
        worst = max(worst, float(np.abs(np.concatenate(outs) - full).max()))

        if case % 5 == 0:
            # Async reuse: same context, fresh proprio content re-appended.
            sample2 = dataclasses.replace(sample, proprio=rng.child("prop2").uniform((3,), -1, 1))
            packed2 = build_training_sequence(model.encoders, sample2, scheme, "rfg", rng.child("seq"))
            full2 = model.forward_full(packed2).data
            cache = model.new_cache(scheme)
            row = 0
            pre_proprio = None
            for s in packed.segments:
                content = Array(packed.rows.data[row : row + s.length])
                row += s.length
                if s.kind == SegmentKind.PROPRIO:
                    pre_proprio = cache.rows
                if s.kind == SegmentKind.NOISY_ACT:
                    break
                model.extend(cache, [s], [content], commit=True)
            act = next(s for s in packed.segments if s.kind == SegmentKind.NOISY_ACT)
            act_rows = Array(packed.rows.data[-act.length :])
            model.extend(cache, [act], [act_rows])
            cache.truncate(pre_proprio)
            prop_slice = next(s for s in packed2.segments if s.kind == SegmentKind.PROPRIO)
            start2 = sum(s.length for s in packed2.segments[: packed2.segments.index(prop_slice)])
            model.extend(cache, [prop_slice], [Array(packed2.rows.data[start2 : start2 + 1])], commit=True)
            out2 = model.extend(cache, [act], [act_rows]).data
            worst = max(worst, float(np.abs(out2 - full2[-act.length :]).max()))
    ok = worst <= tolerance
    return CheckResult("kv-cache-fidelity", ok, f"max abs diff {worst:.2e} over {n_layouts} layouts")


# -- flow-matching identities -----------------------------------------------------------


def check_flow_identities(seed: int = 5) -> list[CheckResult]:
    from ifm.flowmatch import SamplerPlan, euler_sample, make_flow_sample

    rng = RngStream(seed)
    results = []
    target = rng.normal((4, 6))
    anchor = rng.normal((4, 6))
    s0 = make_flow_sample(target, 0.0, "rfg", anchor=anchor, rng=rng.child("a"))
    s1 = make_flow_sample(target, 1.0, "naive", rng=rng.child("b"))
    mid = make_flow_sample(target, 0.5, "naive", rng=rng.child("c"))
    ok_ends = np.array_equal(s0.interp, s0.x0) and np.array_equal(s1.interp, s1.x1)
    results.append(CheckResult("flow-endpoints", bool(ok_ends), "interp(0)=x0 and interp(1)=x1 exactly"))
    mid_ref = 0.5 * mid.x0 + 0.5 * mid.x1
    results.append(
        CheckResult("flow-midpoint", bool(np.allclose(mid.interp, mid_ref, atol=1e-7)), "tau=0.5 identity")
    )

    x0 = rng.normal((3, 3))
    x1 = rng.normal((3, 3))
    const = x1 - x0
    one = euler_sample(lambda x, t: const, SamplerPlan(1), x0)
    fifty = euler_sample(lambda x, t: const, SamplerPlan(50), x0)
    ok_euler = np.abs(one - x1).max() <= 1e-5 and np.abs(fifty - one).max() <= 1e-5
    results.append(CheckResult("euler-constant-oracle", bool(ok_euler), "1-step exact; 1 vs 50 steps identical"))
    return results


def check_forward_counters(seed: int = 2) -> CheckResult:
    """Scheme step accounting: single = 1 + N2, joint = 2N, complete = N1 + N2."""
    from ifm.blockworld import GridConfig, instruction_words, proprio, render, sample_task
    from ifm.control import InferencePlans, PolicyContext, plan_step

    model = tiny_model(seed)
    grid = GridConfig(width=4, height=4, pixels_per_cell=1)
    state = sample_task(RngStream(seed).child("task"), "easy", grid)
    instr = model.vocab.tokenize(instruction_words(state.goal))
    plans = InferencePlans(image_steps=7, action_steps=3, joint_steps=5)
    expected = {"single": (1, 3), "joint": (5, 5), "complete": (7, 3)}
    for scheme, want in expected.items():
        ctx = PolicyContext(model, scheme=scheme, plans=plans, rng=RngStream(seed))
        model.reset_counters()
        plan_step(model, render(state), proprio(state), instr, ctx)
        got = (model.denoise_forwards["image"], model.denoise_forwards["action"])
        if got != want:
            return CheckResult("denoise-step-accounting", False, f"{scheme}: got {got}, want {want}")
    return CheckResult("denoise-step-accounting", True, "single=1+N2, joint=2N, complete=N1+N2")


def check_expert(n_tasks: int = 200, seed: int = 17) -> list[CheckResult]:
    from ifm.blockworld import plan_lower_bound, run_expert, sample_task, segment_runs, success

    root = RngStream(seed)
    failures = 0
    bound_violations = 0
    structure_bad = 0
    for i in range(n_tasks):
        rng = root.child(f"t{i}")
        state = sample_task(rng.child("task"), ("easy", "middle", "hard")[i % 3])
        bound = plan_lower_bound(state)
        try:
            trace = run_expert(state, rng.child("exp"), jitter=0.05)
        except Exception:
            failures += 1
            continue
        if len(trace.frames) > 1.5 * bound:
            bound_violations += 1
        segs = segment_runs(trace.labels)
        prev = 0
        for words, start, end, keyframe in segs:
            if start != prev or not (start <= keyframe < end):
                structure_bad += 1
            prev = end
        if prev != len(trace.frames):
            structure_bad += 1
    return [
        CheckResult("expert-success", failures == 0, f"{n_tasks - failures}/{n_tasks} solved"),
        CheckResult("expert-length-bound", bound_violations == 0, f"{bound_violations} bound violations"),
        CheckResult("expert-segments", structure_bad == 0, "tiling and keyframe containment"),
    ]


def check_dataset_roundtrip(tmpdir: str, seed: int = 23) -> CheckResult:
    import os

    from ifm.blockworld import read_dataset, write_dataset
    from ifm.errors import FormatError
    from ifm.pipeline import generate_episodes

    episodes = generate_episodes(4, seed)
    path = os.path.join(tmpdir, "roundtrip.ifmd")
    write_dataset(episodes, path)
    back = read_dataset(path)
    if len(back) != len(episodes):
        return CheckResult("dataset-roundtrip", False, "episode count mismatch")
    for a, b in zip(episodes, back):
        if a.instruction != b.instruction or a.success != b.success or len(a.steps) != len(b.steps):
            return CheckResult("dataset-roundtrip", False, "metadata mismatch")
        for sa, sb in zip(a.steps, b.steps):
            if not (
                np.array_equal(sa.image, sb.image)
                and np.array_equal(sa.proprio, sb.proprio)
                and np.array_equal(sa.action, sb.action)
            ):
                return CheckResult("dataset-roundtrip", False, "step payload not bitwise equal")
        for ga, gb in zip(a.segments, b.segments):
            if ga.tokens != gb.tokens or ga.start != gb.start or ga.keyframe != gb.keyframe:
                return CheckResult("dataset-roundtrip", False, "segment table mismatch")
    bad = os.path.join(tmpdir, "bad.ifmd")
    with open(path, "rb") as f:
        payload = bytearray(f.read())
    payload[:4] = b"XXXX"
    with open(bad, "wb") as f:
        f.write(payload)
    try:
        read_dataset(bad)
        return CheckResult("dataset-roundtrip", False, "bad magic accepted")
    except FormatError:
        pass
    return CheckResult("dataset-roundtrip", True, "bitwise round trip; bad magic rejected")


def run_selftest(tmpdir: str, quick: bool = False) -> list[CheckResult]:
    """Everything the package promises about its own machinery."""
    results = []
    results.extend(check_primitive_gradients(cases_per_op=5 if quick else 20))
    results.extend(check_mask_leakage())
    results.append(check_cache_equivalence(n_layouts=10 if quick else 50))
    results.extend(check_flow_identities())
    results.append(check_forward_counters())
    results.extend(check_expert(n_tasks=30 if quick else 200))
    results.append(check_dataset_roundtrip(tmpdir))
    return results
