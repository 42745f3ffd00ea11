"""``mummi`` command line: train, eval, viz-latent, gradcheck and gen-data.

Exit codes are 0 on success, 1 for usage or configuration errors and 2 when a
run diverges or a numerical check fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .agent import Agent, DivergenceError, evaluate, train_loop
from .analysis import (calibration_ratio, latent_samples, probe_episodes, projection_rows, scatter_image,
                       write_png)
from .envs import ENV_NAMES, MissingnessModel, RandomPolicy, collect_episode
from .losses import VARIANTS
from .persistence import CheckpointError, load_episode_dir, save_episode_dir

log = logging.getLogger("mummi")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _train_overrides(args) -> dict:
    flags = {"train.seed": args.seed, "train.steps": args.steps, "train.missing_rate": args.missing_rate,
             "train.variant": args.variant, "env": args.env, "out": args.out}
    out = {k: v for k, v in flags.items() if v is not None}
    out.update(_parse_set(args.set))
    return out


def cmd_train(args) -> int:
    cfg = C.load(args.config, _train_overrides(args))
    offline = None
    if args.offline:
        offline = load_episode_dir(args.offline)
        if not offline:
            raise UsageError(f"no episodes found in {args.offline}")
        want = {spec.name: tuple(spec.obs_shape) for spec in cfg.env_config().modality_specs()}
        have = {m: tuple(o.shape[1:]) for m, o in offline[0].observations.items()}
        if have != want:
            raise UsageError(f"episodes in {args.offline} have observations {have}, the config expects {want}")

    def progress(rec: dict) -> None:
        log.info("step %d  model_loss %.4f  return %.3f", rec["step"], rec.get("model_loss") or float("nan"),
                 rec.get("mean_return", float("nan")))

    res = train_loop(cfg, cfg.out, resume=args.resume, offline=offline, progress=progress)
    print(f"trained {res.agent.step} steps; run directory {res.run_dir}")
    return EXIT_OK


def _checkpoint_path(path: str) -> Path:
    p = Path(path)
    return p / "checkpoint.npz" if p.is_dir() else p


def _load_agent(path: str, env: str | None) -> Agent:
    ckpt = _checkpoint_path(path)
    agent = Agent.from_checkpoint(ckpt)
    if env is not None and env != agent.run_config.env:
        rc = C.from_dict({**agent.run_config.to_dict(), "env": env})
        agent = Agent.from_checkpoint(ckpt, rc)
    return agent


def cmd_eval(args) -> int:
    agent = _load_agent(args.checkpoint, args.env)
    rate = 0.0 if args.missing_rate is None else args.missing_rate
    rep = evaluate(agent, agent.run_config.env_config(), rate, args.episodes, seed=args.seed, use_cem=args.cem)
    print(f"reward {rep.summary()}; masked fraction {rep.masked_fraction:.4f}")
    out = Path(args.report) if args.report else _checkpoint_path(args.checkpoint).with_name(f"eval_rate{rate}.json")
    out.write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_viz_latent(args) -> int:
    agent = _load_agent(args.checkpoint, args.env)
    env = agent.run_config.env_config()
    samples = latent_samples(agent.model, probe_episodes(env, args.samples, args.seed), args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = projection_rows(samples)
    with open(out / "latent.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    colors = samples.positions / env.arena
    for source in samples.modalities + ["fused"]:
        pts = np.array([[r["pc1"], r["pc2"]] for r in rows if r["source"] == source])
        write_png(out / f"latent_{source}.png", scatter_image(pts, colors))
    stats = {"mean_std": {m: float(s.mean()) for m, s in samples.stds.items()}, "samples": len(samples)}
    if {"camera", "position"} <= set(samples.modalities):
        stats["calibration_ratio"] = calibration_ratio(samples)
    (out / "calibration.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(f"wrote {len(rows)} rows to {out / 'latent.csv'}")
    for m, s in stats["mean_std"].items():
        print(f"mean expert std {m}: {s:.4f}")
    if "calibration_ratio" in stats:
        print(f"calibration ratio camera/position: {stats['calibration_ratio']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .data import SequenceBatch
    from .diffmath import check_gradients
    from .envs import env_config
    from .losses import world_model_loss
    from .mssm import MSSM, ModalitySpec, ModelConfig

    cfg = ModelConfig([ModalitySpec("position", (2,), (args.hidden,)), ModalitySpec("camera", (4, 4), (args.hidden,))],
                      h_dim=args.h_dim, c_dim=args.c_dim, f_dim=args.f_dim, embed_dim=args.f_dim,
                      hidden=(args.hidden,), init_seed=args.seed)
    env = env_config("toy2d", resolution=4, episode_length=args.T)
    batch = SequenceBatch.stack([collect_episode(env, seed=args.seed + b, missingness=MissingnessModel(0.34, b))
                                 for b in range(args.B)])
    failed = False
    for variant in args.variants:
        model = MSSM(cfg)
        report = check_gradients(lambda: world_model_loss(model, batch, variant, seed=args.seed).total,
                                 model.params.subset(""), max_per_param=args.max_per_param,
                                 rng=np.random.default_rng(args.seed))
        ok = report.max_rel_error < args.tol
        failed |= not ok
        print(f"{variant}: max relative error {report.max_rel_error:.3e} "
              f"(worst {report.worst_param}[{report.worst_index}], {report.n_checked} coordinates) "
              f"{'ok' if ok else 'FAIL'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    if args.policy != "random":
        raise UsageError(f"unknown policy {args.policy!r}")
    env = C.load(args.config, {"env": args.env} if args.env else {}).env_config()
    eps = [collect_episode(env, RandomPolicy(args.seed + i), MissingnessModel(args.missing_rate, args.seed + i),
                           seed=args.seed + i) for i in range(args.episodes)]
    save_episode_dir(args.out, eps)
    print(f"wrote {len(eps)} episodes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mummi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a world model and actor-critic")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--missing-rate", type=float)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--env", choices=ENV_NAMES)
    t.add_argument("--out")
    t.add_argument("--offline", metavar="DIR", help="train on a gen-data archive without collecting")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under a missing-data rate")
    e.add_argument("checkpoint", help="checkpoint file or run directory")
    e.add_argument("--env", choices=ENV_NAMES)
    e.add_argument("--missing-rate", type=float)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=10_000)
    e.add_argument("--cem", action="store_true", help="act with the CEM planner instead of the actor")
    e.add_argument("--report", help="where to write the JSON report")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-latent", help="export expert embeddings as CSV and PNG")
    v.add_argument("checkpoint")
    v.add_argument("--env", choices=ENV_NAMES)
    v.add_argument("--samples", type=int, default=500)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="latent")
    v.set_defaults(func=cmd_viz_latent)

    g = sub.add_parser("gradcheck", help="finite-difference check of the world-model losses")
    g.add_argument("--h-dim", type=int, default=5)
    g.add_argument("--c-dim", type=int, default=3)
    g.add_argument("--f-dim", type=int, default=4)
    g.add_argument("--hidden", type=int, default=6)
    g.add_argument("-B", type=int, default=2)
    g.add_argument("-T", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variants", nargs="+", default=["elbo", "mummi"], choices=VARIANTS)
    g.add_argument("--max-per-param", type=int, default=None)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write random-policy episodes for offline training")
    d.add_argument("--config", help="take env and env_options from a run config")
    d.add_argument("--env", choices=ENV_NAMES)
    d.add_argument("--episodes", type=int, default=10)
    d.add_argument("--policy", default="random")
    d.add_argument("--missing-rate", type=float, default=0.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="data")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, UsageError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
