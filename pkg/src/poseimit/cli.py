"""Command-line surface: `gen`, `train`, `predict`, `eval`.

Every command resolves its configuration (defaults, then --config file, then
--set overrides, then explicit flags), writes the resolved form next to its
outputs, and is deterministic given that resolved configuration.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import imitation as imi
from . import mdp
from . import nets
from .config import ConfigError, RunConfig, parse_config_file
from .data import DatasetError, ErrorTable, HorizonSet
from .nets import CheckpointError


class CliError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "precision", None):
        values["precision"] = args.precision
    if getattr(args, "horizons", None):
        values["horizons"] = args.horizons
    return RunConfig.from_values(values)


def _write_resolved(cfg: RunConfig, out_path, is_dir: bool):
    if is_dir:
        cfg.write_resolved(os.path.join(out_path, "config.resolved"))
    else:
        cfg.write_resolved(str(out_path) + ".resolved.cfg")


def _read_csv_frames(path):
    """Parse a bare CSV of frames; the first row fixes the width."""
    frames = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise CliError(f"{path}:{lineno}: row has {len(cells)} values, expected {width}")
            try:
                frames.append([float(c) for c in cells])
            except ValueError:
                raise CliError(f"{path}:{lineno}: non-numeric cell") from None
    if not frames:
        raise CliError(f"{path}: no frames found")
    return np.asarray(frames, dtype=np.float64)


def _write_csv_frames(path, frames):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in frames:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _load_policy(path, cfg: RunConfig) -> nets.Policy:
    named, precision = nets.load_checkpoint(path)
    if precision != cfg.precision:
        raise CliError(
            f"checkpoint {path} was saved with precision {precision!r} but the run "
            f"uses {cfg.precision!r}; pass --precision {precision}"
        )
    return nets.Policy.from_named(named, dtype=cfg.dtype,
                                  residual_output=cfg.residual_output)


def _policy_fn(policy: nets.Policy, m: int):
    def fn(state):
        with ad.no_grad():
            return policy.forward(state, m).values
    return fn


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    if args.dim < 1 or args.seqs < 1 or args.len < 1:
        raise CliError("--seqs, --len and --dim must be positive")
    manifest = os.path.join(args.out, data_mod.MANIFEST)
    if os.path.exists(manifest) and not args.force:
        raise CliError(f"output dataset already exists at {args.out}; pass --force to replace")
    ds = data_mod.gen_synthetic(args.seqs, args.len, args.dim, seed=cfg.seed,
                                frame_period_ms=args.period_ms, n_actions=args.actions)
    data_mod.save_dataset(ds, args.out, force=args.force)
    _write_resolved(cfg, args.out, is_dir=True)
    print(f"wrote {len(ds)} sequences of {args.len} frames x {args.dim} dims to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.stage == "gail" and not args.init:
        raise CliError("--stage gail requires --init with the BC checkpoint")
    ds = data_mod.load_dataset(args.data)
    ep = cfg.episode()
    os.makedirs(args.out, exist_ok=True)
    _write_resolved(cfg, args.out, is_dir=True)
    seeds = cfg.seeds()
    log = imi.TrainLog(csv_path=os.path.join(args.out, "log.csv"))

    def ckpt_path(name):
        return os.path.join(args.out, name)

    if args.stage in ("bc", "both"):
        policy = nets.Policy(ds.pose_dim, cfg.policy_hidden,
                             rng=np.random.default_rng(seeds["policy_init"]),
                             dtype=cfg.dtype, residual_output=cfg.residual_output)
        hook = None
        if cfg.checkpoint_interval > 0:
            def hook(it, _p=policy):
                nets.save_checkpoint(ckpt_path(f"bc_{it:06d}.ckpt"),
                                     _p.named_params(), cfg.precision)
        imi.bc_train(ds, policy, ep, cfg.bc_config(), log,
                     checkpoint_hook=hook, checkpoint_interval=cfg.checkpoint_interval)
        nets.save_checkpoint(ckpt_path("bc.ckpt"), policy.named_params(), cfg.precision)
        print(f"bc stage done: {cfg.bc_iters} iterations, checkpoint {ckpt_path('bc.ckpt')}")
    else:
        policy = _load_policy(args.init, cfg)
        if policy.pose_dim != ds.pose_dim:
            raise CliError(
                f"checkpoint pose_dim {policy.pose_dim} does not match dataset {ds.pose_dim}"
            )

    if args.stage in ("gail", "both"):
        critic = nets.Critic(ds.pose_dim, cfg.critic_hidden, cfg.critic_mlp_widths,
                             cfg.leaky_slope, rng=np.random.default_rng(seeds["critic_init"]),
                             dtype=cfg.dtype)
        hook = None
        if cfg.checkpoint_interval > 0:
            def hook(it, _p=policy, _c=critic):
                nets.save_checkpoint(ckpt_path(f"gail_{it:06d}.ckpt"),
                                     _p.named_params(), cfg.precision)
                nets.save_checkpoint(ckpt_path(f"gail_critic_{it:06d}.ckpt"),
                                     _c.named_params(), cfg.precision)
        try:
            imi.wgail_train(ds, policy, critic, ep, cfg.gail_config(), log,
                            checkpoint_hook=hook, checkpoint_interval=cfg.checkpoint_interval)
        except imi.DivergenceError as exc:
            nets.save_checkpoint(ckpt_path("diverged.ckpt"), policy.named_params(), cfg.precision)
            nets.save_checkpoint(ckpt_path("diverged_critic.ckpt"), critic.named_params(),
                                 cfg.precision)
            print(f"error: {exc}", file=sys.stderr)
            print(f"dumped last parameters to {ckpt_path('diverged.ckpt')}", file=sys.stderr)
            return 1
        nets.save_checkpoint(ckpt_path("critic.ckpt"), critic.named_params(), cfg.precision)
        print(f"gail stage done: {cfg.gail_iters} iterations")

    nets.save_checkpoint(ckpt_path("final.ckpt"), policy.named_params(), cfg.precision)
    print(f"final checkpoint {ckpt_path('final.ckpt')}")
    return 0


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    ep = cfg.episode()
    frames = _read_csv_frames(args.input)
    if frames.shape[0] < ep.t:
        raise CliError(f"input has {frames.shape[0]} frames; need at least t = {ep.t}")
    prefix = frames[-ep.t :]
    if args.baseline == "zero-velocity":
        pred = data_mod.zero_velocity(prefix, ep.l)
    else:
        if not args.ckpt:
            raise CliError("predict needs --ckpt or --baseline zero-velocity")
        policy = _load_policy(args.ckpt, cfg)
        if policy.pose_dim != frames.shape[1]:
            raise CliError(
                f"checkpoint pose_dim {policy.pose_dim} does not match input {frames.shape[1]}"
            )
        pred = mdp.rollout(_policy_fn(policy, ep.m), prefix, ep)
    _write_csv_frames(args.out, pred)
    _write_resolved(cfg, args.out, is_dir=False)
    print(f"wrote {pred.shape[0]} predicted frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if not args.ckpt and not args.baseline:
        raise CliError("eval needs --ckpt or --baseline zero-velocity")
    ds = data_mod.load_dataset(args.data)
    ep = cfg.episode()
    horizons = HorizonSet(cfg.horizons, ds.frame_period_ms)
    if args.baseline == "zero-velocity":
        policy_fn = data_mod.zero_velocity_policy(ep.m)
    else:
        policy = _load_policy(args.ckpt, cfg)
        if policy.pose_dim != ds.pose_dim:
            raise CliError(
                f"checkpoint pose_dim {policy.pose_dim} does not match dataset {ds.pose_dim}"
            )
        policy_fn = _policy_fn(policy, ep.m)
    table = data_mod.evaluate(policy_fn, ds, ep, horizons,
                              windows_per_action=cfg.eval_windows, seed=cfg.seed)
    if args.compare:
        merged = table.compare(ErrorTable.from_csv(args.compare))
        ErrorTable.write_comparison(merged, args.out)
    else:
        table.to_csv(args.out)
    _write_resolved(cfg, args.out, is_dir=False)
    print(f"wrote error table to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseimit",
        description="Progressive pose prediction: synthetic data, two-stage "
                    "training, prediction, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--precision", choices=("test", "train"),
                       help="64-bit (test) or 32-bit (train) arithmetic")

    p = sub.add_parser("gen", help="generate a synthetic sinusoid dataset")
    common(p)
    p.add_argument("--seqs", type=int, required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--period-ms", type=int, default=40, dest="period_ms")
    p.add_argument("--actions", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the two-stage learner")
    common(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--stage", choices=("bc", "gail", "both"), required=True)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--init", help="BC checkpoint to initialize the gail stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict future frames from a pose CSV")
    common(p)
    p.add_argument("--input", required=True, help="CSV with at least t frames")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="policy checkpoint")
    p.add_argument("--baseline", choices=("zero-velocity",))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="emit a per-action, per-horizon error table")
    common(p)
    p.add_argument("--data", required=True, help="test dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="policy checkpoint")
    p.add_argument("--baseline", choices=("zero-velocity",))
    p.add_argument("--horizons", help="comma list of horizons in ms")
    p.add_argument("--compare", help="second error-table CSV to diff against")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, CheckpointError,
            imi.DivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
