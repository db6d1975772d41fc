"""CLI entry point and experiment orchestration.

Subcommands: gen-data, train, rollout, eval, ablate, bench-latency,
dump-keyframes, selftest. Output tables are written as CSV (re-parseable by
this module) plus markdown for reading.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from ifm.blockworld import (
    DIFFICULTIES,
    GridConfig,
    instruction_words,
    proprio,
    read_dataset,
    render,
    run_expert,
    sample_task,
    write_dataset,
)
from ifm.control import (
    InferencePlans,
    PolicyContext,
    bench_latency,
    expert_rollout,
    plan_step,
    refresh_context,
    rollout,
)
from ifm.encoding import Vocabulary
from ifm.errors import IfmError, OrchestrationError, ParameterError
from ifm.flowmatch import SamplerPlan, init_image_noise, sample_keyframe, write_ppm
from ifm.mot import Model, MoTConfig
from ifm.numerics.random import RngStream
from ifm.pipeline import (
    TrainConfig,
    Trainer,
    generate_episodes,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)


# -- result tables ---------------------------------------------------------------------


@dataclass
class ResultTable:
    fields: list[str]
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in self.fields})

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.fields)
            writer.writeheader()
            writer.writerows(self.rows)

    @classmethod
    def from_csv(cls, path: str) -> "ResultTable":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None:
                raise OrchestrationError(f"{path} has no CSV header")
            return cls(fields=list(reader.fieldnames), rows=[dict(r) for r in reader])

    def to_markdown(self) -> str:
        head = "| " + " | ".join(self.fields) + " |"
        sep = "|" + "|".join(["---"] * len(self.fields)) + "|"
        lines = [head, sep]
        for row in self.rows:
            lines.append("| " + " | ".join(str(row.get(k, "")) for k in self.fields) + " |")
        return "\n".join(lines) + "\n"


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class EvalSettings:
    tiers: tuple[str, ...] = ("easy", "middle", "hard")
    episodes_per_tier: int = 50
    seed: int = 1000
    max_steps: int = 200
    refresh_every: int = 1
    use_env_trigger: bool = True
    color_pool: tuple[int, ...] | None = None
    plans: InferencePlans = field(default_factory=lambda: InferencePlans(image_steps=10, action_steps=10, joint_steps=10))


def evaluate_model(
    model: Model | None,
    settings: EvalSettings,
    scheme: str = "single",
    init_mode: str = "rfg",
    include_subtask: bool = True,
    include_keyframe: bool = True,
    policy: str = "model",
    grid: GridConfig | None = None,
) -> list[dict]:
    """Success rate and planning accuracy per tier over seeded (paired) tasks."""
    rows = []
    for tier in settings.tiers:
        succ = 0
        plan_hits = 0
        plan_total = 0
        steps_sum = 0
        for i in range(settings.episodes_per_tier):
            task_rng = RngStream(settings.seed).child(f"{tier}-{i}")
            state = sample_task(task_rng.child("task"), tier, grid, settings.color_pool)
            if policy == "expert":
                result = expert_rollout(state, max_steps=settings.max_steps, rng=task_rng.child("jitter"))
            else:
                ctx = PolicyContext(
                    model,
                    scheme=scheme,
                    init_mode=init_mode,
                    plans=settings.plans,
                    refresh_every=settings.refresh_every,
                    use_env_trigger=settings.use_env_trigger,
                    include_subtask=include_subtask,
                    include_keyframe=include_keyframe,
                    rng=task_rng.child("policy"),
                )
                result = rollout(model, state, ctx, max_steps=settings.max_steps)
            succ += int(result.success)
            hits = sum(1 for got, want in result.planning_samples if got == want)
            plan_hits += hits
            plan_total += len(result.planning_samples)
            steps_sum += result.steps
        n = settings.episodes_per_tier
        rows.append(
            {
                "tier": tier,
                "episodes": n,
                "success_rate": 100.0 * succ / n,
                "planning_accuracy": 100.0 * plan_hits / plan_total if plan_total else 0.0,
                "mean_steps": steps_sum / n,
            }
        )
    return rows


def success_rate(rows: list[dict]) -> float:
    weights = sum(r["episodes"] for r in rows)
    return sum(r["success_rate"] * r["episodes"] for r in rows) / weights


# -- keyframe step-count sweep ------------------------------------------------------------


def heldout_states(n: int, seed: int, grid: GridConfig | None = None, color_pool=None) -> list[tuple]:
    """(observation, instruction words, ground-truth keyframe) triples."""
    root = RngStream(seed).child("sweep-states")
    out = []
    i = 0
    while len(out) < n:
        rng = root.child(f"s{i}")
        i += 1
        state = sample_task(rng.child("task"), ("easy", "middle", "hard")[i % 3], grid, color_pool)
        trace = run_expert(state, rng.child("exp"), jitter=0.05)
        from ifm.blockworld import segment_runs

        segs = segment_runs(trace.labels)
        words, start, end, keyframe = segs[int(rng.integers(0, max(1, len(segs) - 1)))]
        t = int(rng.integers(start, end))
        out.append((trace.frames[t], instruction_words(trace.goal), trace.frames[keyframe]))
    return out


def keyframe_sweep(
    models: dict[str, Model],
    steps: tuple[int, ...] = (1, 2, 5, 10, 20, 50),
    n_states: int = 50,
    seed: int = 77,
    out_dir: str | None = None,
    dump_count: int = 4,
) -> ResultTable:
    """Mean pixel MSE of generated keyframes per denoise step count.

    Also reports MSE restricted to background pixels (those unchanged
    between the observation and the true keyframe) at the smallest step
    count. The same per-state noise seeds are shared across models.
    """
    if not steps:
        raise ParameterError("step list must not be empty")
    states = heldout_states(n_states, seed)
    table = ResultTable(["model", "steps", "mse", "bg_mse"])
    for name, model in models.items():
        init_mode = "rfg" if name == "rfg" else "naive"
        errors = {s: [] for s in steps}
        bg_errors = {s: [] for s in steps}
        for si, (obs, instr, key) in enumerate(states):
            ctx = PolicyContext(model, scheme="single", init_mode=init_mode, rng=RngStream(seed).child(f"{name}-{si}"))
            ids = model.vocab.tokenize(instr)
            refresh_context(model, obs, ids, ctx)
            anchor = ctx.last_anchor
            eps_rng = RngStream(seed).child(f"eps-{si}")  # shared across models
            x0 = init_image_noise(anchor.shape, init_mode, eps_rng, anchor=anchor)
            changed = np.abs(obs - key).max(axis=-1) > 0.05
            bg = ~changed
            for s in steps:
                latent = sample_keyframe(model, ctx.cache, SamplerPlan(s, "single", init_mode), x0)
                img = np.clip(model.encoders.decode_gen(latent), -1.0, 1.0)
                errors[s].append(float(((img - key) ** 2).mean()))
                if bg.any():
                    bg_errors[s].append(float(((img - key) ** 2)[bg].mean()))
                if out_dir and si < dump_count:
                    write_ppm(img, os.path.join(out_dir, f"keyframe_{name}_state{si}_steps{s}.ppm"))
            if out_dir and si < dump_count:
                write_ppm(obs, os.path.join(out_dir, f"keyframe_context_state{si}.ppm"))
                write_ppm(key, os.path.join(out_dir, f"keyframe_truth_state{si}.ppm"))
        for s in steps:
            table.append(
                model=name,
                steps=s,
                mse=float(np.mean(errors[s])),
                bg_mse=float(np.mean(bg_errors[s])) if bg_errors[s] else "",
            )
    return table


# -- ablation grid ----------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    scheme: str = "single"
    init_mode: str = "rfg"
    textual: bool = True
    keyframe: bool = True


FULL_GRID = (
    Variant("full"),
    Variant("wo_textual", textual=False),
    Variant("wo_keyframe", keyframe=False),
    Variant("naive_single", init_mode="naive"),
)


@dataclass
class ExperimentSpec:
    name: str = "ablation"
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[Variant, ...] = FULL_GRID
    tiers: tuple[str, ...] = ("easy", "middle", "hard")
    episodes_per_tier: int = 50
    data_episodes: int = 300
    stage1_steps: int = 600
    stage2_steps: int = 900
    train_width: int = 64
    train_layers: int = 4
    batch_size: int = 4
    out_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            raise ParameterError("need at least one seed")
        if not self.variants:
            raise ParameterError("variant grid must not be empty")


def base_train_config(spec: ExperimentSpec, seed: int, **overrides) -> TrainConfig:
    kwargs = dict(
        stage=2,
        seed=seed,
        steps=spec.stage2_steps,
        batch_size=spec.batch_size,
        width=spec.train_width,
        layers=spec.train_layers,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def train_variant(
    spec: ExperimentSpec,
    variant: Variant,
    seed: int,
    episodes,
    vocab: Vocabulary,
    stage1_model: Model | None = None,
) -> Model:
    cfg = base_train_config(
        spec,
        seed,
        scheme=variant.scheme,
        noise_init=variant.init_mode,
        include_subtask=variant.textual,
        include_keyframe=variant.keyframe,
        lambda_v=1.0 if variant.keyframe else 0.0,
        lambda_l=1.0 if variant.textual else 0.0,
    )
    trainer = train_stage2(cfg, episodes, vocab, model=stage1_model)
    return trainer.model


def run_stage1(spec: ExperimentSpec, seed: int, episodes, vocab: Vocabulary, init_mode: str) -> Model:
    cfg = base_train_config(spec, seed, stage=1, steps=spec.stage1_steps, noise_init=init_mode)
    return train_stage1(cfg, episodes, vocab).model


def ablation_tables(spec: ExperimentSpec, pretrain: bool = True, verbose: bool = True) -> ResultTable:
    """Train the variant grid and evaluate per tier. One row per
    (variant, seed, tier) plus aggregate rows across seeds."""
    os.makedirs(spec.out_dir, exist_ok=True)
    vocab = Vocabulary()
    table = ResultTable(
        ["variant", "seed", "tier", "episodes", "success_rate", "planning_accuracy", "mean_steps"]
    )
    for seed in spec.seeds:
        episodes = generate_episodes(spec.data_episodes, seed=seed + 9000)
        stage1_models: dict[str, Model] = {}
        if pretrain:
            for init_mode in {v.init_mode for v in spec.variants}:
                if verbose:
                    print(f"[ablate] stage-1 seed={seed} init={init_mode}", flush=True)
                stage1_models[init_mode] = run_stage1(spec, seed, episodes, vocab, init_mode)
        for variant in spec.variants:
            if verbose:
                print(f"[ablate] stage-2 {variant.name} seed={seed}", flush=True)
            base = stage1_models.get(variant.init_mode) if pretrain else None
            import copy

            model = train_variant(spec, variant, seed, episodes, vocab, stage1_model=copy.deepcopy(base))
            save_checkpoint(
                os.path.join(spec.out_dir, f"{spec.name}_{variant.name}_seed{seed}.ifmc"),
                model,
                meta={"variant": variant.name, "scheme": variant.scheme, "init": variant.init_mode},
            )
            settings = EvalSettings(tiers=spec.tiers, episodes_per_tier=spec.episodes_per_tier, seed=4000 + seed)
            rows = evaluate_model(
                model,
                settings,
                scheme=variant.scheme,
                init_mode=variant.init_mode,
                include_subtask=variant.textual,
                include_keyframe=variant.keyframe,
            )
            for r in rows:
                table.append(variant=variant.name, seed=seed, **r)
    return table


# -- CLI ----------------------------------------------------------------------------------


def _out_dir(args) -> str:
    path = os.environ.get("IFM_OUT", getattr(args, "out_dir", None) or "out")
    os.makedirs(path, exist_ok=True)
    return path


def _parse_colors(text: str | None):
    if not text:
        return None
    return tuple(int(c) for c in text.split(","))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifm", description="Interleaved planning on a synthetic block world")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write scripted-expert demonstrations to a dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", default="mixed", choices=DIFFICULTIES + ("mixed",))
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--colors", default=None, help="comma-separated color ids, e.g. 0,1,2,3")

    p = sub.add_parser("train", help="train stage 1 or stage 2 from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--metrics-csv", default=None)

    p = sub.add_parser("rollout", help="run the policy in the environment")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", default="easy", choices=DIFFICULTIES)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--async-k", type=int, default=1)
    p.add_argument("--scheme", default=None)
    p.add_argument("--init", default=None, choices=("rfg", "naive"))
    p.add_argument("--trace", default=None, help="per-chunk CSV trace path")

    p = sub.add_parser("eval", help="tiered success/planning-accuracy evaluation")
    p.add_argument("--ckpt", default=None, help="omit with --policy expert")
    p.add_argument("--policy", default="model", choices=("model", "expert"))
    p.add_argument("--tiers", default="easy,middle,hard")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--scheme", default=None)
    p.add_argument("--init", default=None, choices=("rfg", "naive"))
    p.add_argument("--colors", default=None)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("ablate", help="train and evaluate the full variant grid")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--tiers", default="easy,middle,hard")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--data-episodes", type=int, default=300)
    p.add_argument("--stage1-steps", type=int, default=600)
    p.add_argument("--stage2-steps", type=int, default=900)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--no-pretrain", action="store_true")

    p = sub.add_parser("bench-latency", help="per-chunk wallclock by conditioning scheme")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--n1", type=int, default=50)
    p.add_argument("--n2", type=int, default=10)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--patch", type=int, default=1)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("dump-keyframes", help="step-count sweep of generated keyframes")
    p.add_argument("--ckpt-rfg", required=True)
    p.add_argument("--ckpt-naive", required=True)
    p.add_argument("--steps", default="1,2,5,10,20,50")
    p.add_argument("--states", type=int, default=50)
    p.add_argument("--seed", type=int, default=77)
    p.add_argument("--out-dir", default=None)

    p = sub.add_parser("selftest", help="run every property suite")
    p.add_argument("--quick", action="store_true")
    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _dispatch(args)
    except IfmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gen-data":
        episodes = generate_episodes(
            args.episodes, args.seed, args.difficulty, color_pool=_parse_colors(args.colors), jitter=args.jitter
        )
        count = write_dataset(episodes, args.out)
        print(f"wrote {count} episodes to {args.out}")
        return 0

    if args.command == "train":
        cfg = TrainConfig.from_file(args.config)
        if args.dataset:
            cfg.dataset = args.dataset
        if args.steps is not None:
            cfg.steps = args.steps
        if args.init_checkpoint:
            cfg.init_checkpoint = args.init_checkpoint
        if args.metrics_csv:
            cfg.metrics_csv = args.metrics_csv
        episodes = read_dataset(cfg.dataset) if cfg.dataset else []
        if cfg.stage == 1:
            trainer = train_stage1(cfg, episodes)
        else:
            trainer = train_stage2(cfg, episodes)
        save_checkpoint(
            args.out,
            trainer.model,
            trainer.opt,
            extras=trainer.state_extras(),
            meta={"scheme": cfg.scheme, "init": cfg.noise_init, "stage": cfg.stage},
        )
        last = trainer.history[-1] if trainer.history else {}
        print(f"trained {cfg.steps} steps; final total loss {last.get('total', float('nan')):.4f}; saved {args.out}")
        return 0

    if args.command == "rollout":
        bundle = load_checkpoint(args.ckpt)
        model = bundle.model
        scheme = args.scheme or bundle.meta.get("scheme", "single")
        init_mode = args.init or bundle.meta.get("init", "rfg")
        successes = 0
        for i in range(args.episodes):
            rng = RngStream(args.seed).child(f"rollout-{i}")
            state = sample_task(rng.child("task"), args.difficulty)
            ctx = PolicyContext(
                model, scheme=scheme, init_mode=init_mode, refresh_every=args.async_k, rng=rng.child("policy")
            )
            result = rollout(model, state, ctx, max_steps=args.max_steps)
            successes += int(result.success)
            print(
                f"episode {i}: success={result.success} steps={result.steps} chunks={result.chunks} "
                f"refreshes={result.refreshes} plan_acc={result.planning_accuracy:.2f} "
                f"aps={result.actions_per_second:.1f}"
            )
            if args.trace:
                fields = sorted({k for row in result.trace for k in row})
                with open(args.trace, "w", newline="") as f:
                    writer = csv.DictWriter(f, fieldnames=fields)
                    writer.writeheader()
                    writer.writerows(result.trace)
        print(f"success {successes}/{args.episodes}")
        return 0

    if args.command == "eval":
        settings = EvalSettings(
            tiers=tuple(args.tiers.split(",")),
            episodes_per_tier=args.episodes,
            seed=args.seed,
            max_steps=args.max_steps,
            color_pool=_parse_colors(args.colors),
        )
        if args.policy == "expert":
            rows = evaluate_model(None, settings, policy="expert")
        else:
            if not args.ckpt:
                raise ParameterError("eval with --policy model needs --ckpt")
            bundle = load_checkpoint(args.ckpt)
            rows = evaluate_model(
                bundle.model,
                settings,
                scheme=args.scheme or bundle.meta.get("scheme", "single"),
                init_mode=args.init or bundle.meta.get("init", "rfg"),
            )
        table = ResultTable(["tier", "episodes", "success_rate", "planning_accuracy", "mean_steps"], rows)
        print(table.to_markdown())
        if args.csv:
            table.to_csv(args.csv)
        return 0

    if args.command == "ablate":
        spec = ExperimentSpec(
            seeds=tuple(int(s) for s in args.seeds.split(",")),
            tiers=tuple(args.tiers.split(",")),
            episodes_per_tier=args.episodes,
            data_episodes=args.data_episodes,
            stage1_steps=args.stage1_steps,
            stage2_steps=args.stage2_steps,
            train_width=args.width,
            train_layers=args.layers,
            out_dir=_out_dir(args),
        )
        table = ablation_tables(spec, pretrain=not args.no_pretrain)
        csv_path = os.path.join(spec.out_dir, f"{spec.name}.csv")
        table.to_csv(csv_path)
        with open(os.path.join(spec.out_dir, f"{spec.name}.md"), "w") as f:
            f.write(table.to_markdown())
        ResultTable.from_csv(csv_path)  # round-trip schema check
        print(table.to_markdown())
        return 0

    if args.command == "bench-latency":
        if args.ckpt:
            model = load_checkpoint(args.ckpt).model
        else:
            vocab = Vocabulary()
            patches = (16 // args.patch) ** 2
            model = Model(
                MoTConfig(width=args.width, vocab_size=len(vocab), patch=args.patch, max_len=max(256, 4 * patches + 96)),
                vocab,
                seed=0,
            )
        plans = InferencePlans(image_steps=args.n1, action_steps=args.n2, joint_steps=args.n)
        rows = bench_latency(model, plans=plans, trials=args.trials)
        table = ResultTable(
            ["scheme", "mean_ms", "std_ms", "trials", "image_forwards", "action_forwards"],
            [dataclasses.asdict(r) for r in rows],
        )
        print(table.to_markdown())
        if args.csv:
            table.to_csv(args.csv)
        by = {r.scheme: r.mean_ms for r in rows}
        ordered = by["single"] < by["joint"] < by["complete"]
        print(f"ordering single < joint < complete: {'ok' if ordered else 'VIOLATED'}")
        return 0 if ordered else 1

    if args.command == "dump-keyframes":
        out = _out_dir(args)
        models = {
            "rfg": load_checkpoint(args.ckpt_rfg).model,
            "naive": load_checkpoint(args.ckpt_naive).model,
        }
        steps = tuple(int(s) for s in args.steps.split(","))
        table = keyframe_sweep(models, steps=steps, n_states=args.states, seed=args.seed, out_dir=out)
        table.to_csv(os.path.join(out, "keyframe_sweep.csv"))
        print(table.to_markdown())
        return 0

    if args.command == "selftest":
        from ifm.checks import run_selftest

        with tempfile.TemporaryDirectory() as tmp:
            results = run_selftest(tmp, quick=args.quick)
        failed = [r for r in results if not r.ok]
        for r in results:
            print(r)
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return 0 if not failed else 1

    raise ParameterError(f"unknown command {args.command!r}")


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
