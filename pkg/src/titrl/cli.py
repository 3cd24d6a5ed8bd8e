"""Command-line entry point: ``titrl <subcommand> [--flags]``.

Every failure ends with one JSON line on stderr, e.g.
``{"error": "ConfigError", "key": "patch_size", "message": "..."}``,
and a nonzero exit status (2 configuration or usage, 3 files and
checkpoints, 4 numerical trouble, 1 anything else).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from titrl.autodiff import no_grad
from titrl.backbone import (
    TITModel,
    build_variant,
    count_information_flows,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from titrl.config import FIELDS, RunConfig, echo_config, parse_config, write_echo
from titrl.envs import EpisodeFile, ObservationHistory, make_env
from titrl.errors import CheckpointError, ConfigError, NumericalError, ShapeError
from titrl.training import MetricsWriter, PPOTrainer, evaluate_policy, greedy_policy

log = logging.getLogger("titrl")

ABLATION_VARIANTS = ("enhanced", "wo_dense", "wo_inner", "wo_outer")
FLOW_COLUMNS = ("variant", "num_blocks", "context_len", "spatial", "temporal", "s_s", "t_t", "s_t", "t_s")


class UsageError(Exception):
    pass


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary 8-bit grayscale PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, dims, maxval, data = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise CheckpointError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)


def min_max_scale(weights: np.ndarray) -> np.ndarray:
    """Map a heat map to 0..255; a constant map becomes all zeros."""
    lo, hi = float(weights.min()), float(weights.max())
    if hi <= lo:
        return np.zeros(weights.shape, dtype=np.uint8)
    return np.rint((weights - lo) / (hi - lo) * 255.0).astype(np.uint8)


# -- train / eval -----------------------------------------------------------------------


def train_one_seed(cfg: RunConfig, seed: int, variant: str | None = None, resume: str | None = None) -> dict:
    """Train a single seed and write its checkpoint, metrics CSV and evaluation report.

    With an explicit ``variant`` the outputs go to ``out_dir/<variant>/seed_<n>``,
    otherwise to ``out_dir/seed_<n>``.
    """
    out = Path(cfg.out_dir) / (f"{variant}/seed_{seed}" if variant else f"seed_{seed}")
    variant = variant or cfg.variant
    out.mkdir(parents=True, exist_ok=True)
    model = build_variant(cfg.model_config(variant=variant), seed=seed)
    if resume is not None:
        start = load_checkpoint(resume)
        if not isinstance(start, TITModel) or start.cfg != model.cfg:
            raise CheckpointError(f"{resume}: checkpoint configuration does not match the run configuration")
        model.load_state_dict(start.state_dict())
    metrics = MetricsWriter(out / "metrics.csv", wall_clock=cfg.record_wall_clock)
    trainer = PPOTrainer(model, cfg.env_factory(), cfg.train_config(seed), metrics)
    trainer.train()
    extra = {"env": cfg.env, "frame_size": cfg.frame_size, "seed": seed, "env_steps": trainer.env_steps}
    save_checkpoint(out / "model.tit", model, extra)
    result = {"seed": seed, "variant": variant, "env_steps": trainer.env_steps, "updates": trainer.updates}
    if cfg.eval_episodes:
        report = evaluate_policy(model, cfg.env_factory(), cfg.eval_episodes, seed=eval_seed(seed))
        result.update(report.to_dict())
    _write_json(out / "result.json", result)
    return result


def eval_seed(seed: int) -> int:
    """Evaluation episodes use seeds disjoint from the training streams."""
    return 10_000_000 + 1000 * seed


def _run_seeds(cfg: RunConfig, jobs, parallel: int):
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(train_one_seed, cfg, *job) for job in jobs]
            return [f.result() for f in futures]
    return [train_one_seed(cfg, *job) for job in jobs]


def cmd_train(args, cfg: RunConfig) -> int:
    write_echo(cfg, cfg.out_dir)
    if args.resume and len(cfg.seeds) != 1:
        raise UsageError("--resume needs exactly one seed")
    if args.resume and not Path(args.resume).is_file():
        raise CheckpointError(f"cannot resume: no checkpoint at {args.resume}")
    results = _run_seeds(cfg, [(s, None, args.resume) for s in cfg.seeds], args.parallel)
    for r in results:
        line = f"seed {r['seed']}: {r['env_steps']} steps"
        if "mean" in r:
            line += f", eval mean {r['mean']:.2f} std {r['std']:.2f} over {r['episodes']} episodes"
        print(line)
    return 0


def cmd_eval(args, _cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, TITModel):
        raise CheckpointError(f"{args.checkpoint}: expected a policy checkpoint, found a sequence model")
    _, meta = read_checkpoint(args.checkpoint)
    extra = meta.get("extra", {})
    env_id, frame = extra.get("env", "cartpole"), extra.get("frame_size", 24)
    env = make_env(env_id, frame)
    if tuple(env.obs_shape) != model.cfg.obs_shape:
        raise CheckpointError(f"checkpoint observation shape {model.cfg.obs_shape} does not match {env_id} {env.obs_shape}")
    report = evaluate_policy(model, lambda: make_env(env_id, frame), args.episodes, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    _write_json(out, {"checkpoint": str(args.checkpoint), "env": env_id, "seed": args.seed, **report.to_dict()})
    print(f"mean {report.mean:.2f} std {report.std:.2f} over {report.episodes} episodes -> {out}")
    return 0


# -- ablation ---------------------------------------------------------------------------


def ablation_table(results: list[dict]) -> list[tuple[str, float, float]]:
    """(variant, mean, std) over all evaluation episodes pooled across seeds."""
    rows = []
    for variant in ABLATION_VARIANTS:
        returns = [x for r in results if r["variant"] == variant for x in r.get("returns", [])]
        arr = np.asarray(returns, dtype=np.float64)
        rows.append((variant, float(arr.mean()) if arr.size else float("nan"), float(arr.std()) if arr.size else float("nan")))
    return rows


def cmd_ablate(args, cfg: RunConfig) -> int:
    if cfg.eval_episodes < 1:
        raise ConfigError("the comparison table needs evaluation episodes", key="eval_episodes")
    write_echo(cfg, cfg.out_dir)
    jobs = [(s, v, None) for v in ABLATION_VARIANTS for s in cfg.seeds]
    results = _run_seeds(cfg, jobs, args.parallel)
    rows = ablation_table(results)
    _write_csv(Path(cfg.out_dir) / "ablation.csv", ("variant", "mean", "std"), [(v, repr(m), repr(s)) for v, m, s in rows])
    width = max(len(v) for v in ABLATION_VARIANTS)
    print(f"{'variant':<{width}}  {'mean':>10}  {'std':>10}")
    for v, m, s in rows:
        print(f"{v:<{width}}  {m:>10.3f}  {s:>10.3f}")
    return 0


# -- flows ------------------------------------------------------------------------------


def flow_rows(num_blocks: int, context_len: int) -> list[tuple]:
    return [(v, num_blocks, context_len) + count_information_flows(num_blocks, context_len, v).as_row() for v in ("vanilla", "enhanced")]


def cmd_flows(args, _cfg) -> int:
    if args.num_blocks < 1 or args.context_len < 1:
        raise ConfigError("must be >= 1", key="num_blocks" if args.num_blocks < 1 else "context_len")
    rows = flow_rows(args.num_blocks, args.context_len)
    print(f"{'variant':<9} {'spatial':>8} {'temporal':>8} {'S-S':>5} {'T-T':>5} {'S-T':>5} {'T-S':>5}")
    for row in rows:
        print(f"{row[0]:<9} " + " ".join(f"{v:>{w}}" for v, w in zip(row[3:], (8, 8, 5, 5, 5, 5))))
    if args.csv:
        _write_csv(Path(args.csv), FLOW_COLUMNS, rows)
    return 0


# -- visualize ----------------------------------------------------------------------------


def patch_grid(cfg) -> tuple[int, int]:
    if cfg.obs_kind == "image":
        return cfg.obs_shape[0] // cfg.patch_size, cfg.obs_shape[1] // cfg.patch_size
    return 1, cfg.num_patches


def attention_artifacts(model: TITModel, window: np.ndarray, valid: np.ndarray, out: Path) -> dict:
    """Write inner class-query maps and outer K x K maps for one observation window.

    ``inner_attention.csv`` has columns block, head, slot, token, row, col, weight;
    token 0 is the class token itself (row and col left empty), tokens 1..N are
    patches in raster order. ``outer_attention.csv`` has block, head, query, key,
    weight. Images are min-max scaled per map.
    """
    records = []
    with no_grad():
        model.forward(window[None], valid[None], records=records)
    rows_in, rows_out = [], []
    grid_h, grid_w = patch_grid(model.cfg)
    written = {"inner": 0, "outer": 0}
    for rec in records:
        w = np.asarray(rec.weights, dtype=np.float64)[0]
        if rec.stage == "inner":
            # w: (K, N+1, N+1); row 0 is the class-token query
            for slot in range(w.shape[0]):
                if not valid[slot]:
                    continue
                query = w[slot, 0]
                for tok, value in enumerate(query):
                    r, c = ("", "") if tok == 0 else divmod(tok - 1, grid_w)
                    rows_in.append((rec.block_index, rec.head_index, slot, tok, r, c, repr(float(value))))
                heat = query[1:].reshape(grid_h, grid_w)
                write_pgm(out / f"inner_b{rec.block_index}_h{rec.head_index}_k{slot}.pgm", min_max_scale(heat))
                written["inner"] += 1
        elif rec.stage == "outer":
            for q in range(w.shape[0]):
                for k in range(w.shape[1]):
                    rows_out.append((rec.block_index, rec.head_index, q, k, repr(float(w[q, k]))))
            write_pgm(out / f"outer_b{rec.block_index}_h{rec.head_index}.pgm", min_max_scale(w))
            written["outer"] += 1
    _write_csv(out / "inner_attention.csv", ("block", "head", "slot", "token", "row", "col", "weight"), rows_in)
    _write_csv(out / "outer_attention.csv", ("block", "head", "query", "key", "weight"), rows_out)
    return written


def cmd_visualize(args, _cfg) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, TITModel):
        raise CheckpointError(f"{args.checkpoint}: expected a policy checkpoint")
    _, meta = read_checkpoint(args.checkpoint)
    extra = meta.get("extra", {})
    env = make_env(extra.get("env", "cartpole"), extra.get("frame_size", 24))
    if tuple(env.obs_shape) != model.cfg.obs_shape:
        raise CheckpointError(f"checkpoint observation shape {model.cfg.obs_shape} does not match environment {env.obs_shape}")
    hist = ObservationHistory(model.cfg.context_len, env.obs_shape)
    hist.push(env.reset(seed=args.seed))
    policy = greedy_policy(model)
    for _ in range(args.steps):
        frames, valid = hist.window()
        res = env.step(int(policy(frames[None], valid[None])[0]))
        if res.done:
            break
        hist.push(res.observation)
    frames, valid = hist.window()
    out = Path(args.out_dir)
    written = attention_artifacts(model, frames, valid, out)
    print(f"wrote {written['inner']} inner and {written['outer']} outer maps to {out}")
    return 0


# -- offline mode ---------------------------------------------------------------------------


def cmd_collect(args, _cfg) -> int:
    from titrl.training.dt_train import collect_expert_episodes

    if args.episodes < 1:
        raise ConfigError("must be >= 1", key="episodes")
    data = collect_expert_episodes(args.episodes, seed=args.seed, frame_size=args.frame_size)
    data.write(args.out)
    steps = sum(len(ep["actions"]) for ep in data.episodes)
    print(f"wrote {args.episodes} episodes ({steps} steps) to {args.out}")
    return 0


def cmd_dt_train(args, cfg: RunConfig) -> int:
    from titrl.dt import DTModel
    from titrl.training.dt_train import DTConfig, WindowDataset, action_accuracy, train_dt, trajectories_from

    data = EpisodeFile.read(args.data)
    if data.env_id != cfg.env or tuple(data.obs_shape) != tuple(cfg.make_env().obs_shape):
        raise ConfigError(f"episode file holds {data.env_id} {data.obs_shape}, config describes {cfg.env}", key="env")
    write_echo(cfg, cfg.out_dir)
    for seed in cfg.seeds:
        out = Path(cfg.out_dir) / f"seed_{seed}"
        model = DTModel(cfg.model_config(), seed=seed)
        dataset = WindowDataset(trajectories_from(data), cfg.context_len, return_scale=cfg.dt_return_scale)
        dcfg = DTConfig(steps=cfg.dt_steps, batch_size=cfg.dt_batch_size, learning_rate=cfg.dt_learning_rate, return_scale=cfg.dt_return_scale, seed=seed)
        metrics = MetricsWriter(out / "metrics.csv", columns=("step", "loss", "accuracy"), wall_clock=False)
        train_dt(model, dataset, dcfg, on_step=lambda step, loss, acc: metrics.write(step=step, loss=loss, accuracy=acc))
        acc = action_accuracy(model, dataset)
        save_checkpoint(out / "model.tit", model, {"env": cfg.env, "frame_size": cfg.frame_size, "seed": seed})
        _write_json(out / "result.json", {"seed": seed, "steps": cfg.dt_steps, "action_accuracy": acc})
        print(f"seed {seed}: action accuracy {acc:.4f}")
    return 0


# -- argument parsing ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    group = p.add_argument_group("configuration overrides (same syntax as the file)")
    for name in FIELDS:
        group.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="titrl", add_help=False, allow_abbrev=False, description="Transformer-in-Transformer policies at desk scale.")
    parser.add_argument("--help", action="help", help="show this message and exit")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text, config=False):
        p = sub.add_parser(name, add_help=False, allow_abbrev=False, help=help_text, description=help_text)
        p.add_argument("--help", action="help", help="show this message and exit")
        if config:
            _add_config_flags(p)
        p.set_defaults(func=func, uses_config=config)
        return p

    p = command("train", cmd_train, "train one model per seed with the clipped-surrogate trainer", config=True)
    p.add_argument("--resume", help="initialize weights from this checkpoint")
    p.add_argument("--parallel", type=int, default=1, help="worker processes for the seed list")
    p.add_argument("--print-config", action="store_true", help="echo the effective configuration and exit")

    p = command("eval", cmd_eval, "evaluate a checkpoint greedily")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = command("ablate", cmd_ablate, "train and evaluate the four ablation variants under one budget", config=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--print-config", action="store_true")

    p = command("flows", cmd_flows, "count information flows for both backbone variants")
    p.add_argument("--num-blocks", type=int, required=True)
    p.add_argument("--context-len", type=int, required=True)
    p.add_argument("--csv", help="also write the table here")

    p = command("visualize", cmd_visualize, "export attention maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0, help="episode seed")
    p.add_argument("--steps", type=int, default=0, help="greedy steps to take before recording")

    p = command("collect", cmd_collect, "record scripted DotCatcher episodes for offline training")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-size", type=int, default=24)
    p.add_argument("--out", required=True)

    p = command("dt-train", cmd_dt_train, "train the return-conditioned sequence model on recorded episodes", config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--print-config", action="store_true")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {name: getattr(args, "cfg_" + name) for name in FIELDS if getattr(args, "cfg_" + name) is not None}
    return parse_config(args.config, overrides)


def _error_line(exc: BaseException) -> tuple[int, str]:
    key = getattr(exc, "key", None)
    if isinstance(exc, (ConfigError, UsageError)):
        code = 2
    elif isinstance(exc, (CheckpointError, OSError)):
        code = 3
    elif isinstance(exc, (NumericalError, FloatingPointError)):
        code = 4
    else:
        code = 1
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if key is not None:
        payload["key"] = key
    return code, json.dumps(payload, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        cfg = config_from_args(args) if args.uses_config else None
        if cfg is not None and getattr(args, "print_config", False):
            sys.stdout.write(echo_config(cfg))
            return 0
        return args.func(args, cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (ConfigError, UsageError, CheckpointError, NumericalError, ShapeError, OSError, ValueError) as exc:
        code, line = _error_line(exc)
        print(line, file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
