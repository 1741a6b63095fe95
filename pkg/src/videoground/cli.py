"""Command-line entry points: train / eval / gradcheck / ablate / gen-data.

Configuration lives in a YAML file with optional ``world``, ``model`` and
``train`` sections whose keys mirror the corresponding dataclass fields;
individual values can be overridden on the command line with
``--set section.key=value``. The default seed comes from the
``VIDEOGROUND_SEED`` environment variable when present.

Exit codes: 0 success, 1 failed gradcheck, 2 usage or malformed config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import metrics, pipeline as P, retrieval as R, tensor as T, world as W
from .attention import HeadConfig, MultiHeadAttention
from .pipeline import GroundingModel, ModelConfig, TrainConfig
from .world import WorldConfig

log = logging.getLogger("videoground")

USAGE_ERROR = 2

_TUPLE_KEYS = {"grid", "actions", "colors", "shapes", "proposal_scales"}


class CliError(Exception):
    """Malformed config or arguments; maps to exit code 2."""


def _coerce(section: dict) -> dict:
    return {k: tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v
            for k, v in section.items()}


def _build(cls, section: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise CliError(f"unknown {name} config keys: {sorted(unknown)}")
    try:
        return cls(**_coerce(section))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {name} config: {exc}") from exc


def load_config(path: str | None, overrides: list[str] | None = None,
                seed: int | None = None):
    """Returns (WorldConfig, ModelConfig, TrainConfig)."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise CliError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError("config root must be a mapping")
    unknown = set(raw) - {"world", "model", "train"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    sections = {name: dict(raw.get(name) or {})
                for name in ("world", "model", "train")}
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(f"override must look like section.key=value: "
                           f"{item!r}")
        key, value = item.split("=", 1)
        section, field = key.split(".", 1)
        if section not in sections:
            raise CliError(f"unknown override section {section!r}")
        sections[section][field] = yaml.safe_load(value)
    if seed is None:
        env = os.environ.get("VIDEOGROUND_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError as exc:
                raise CliError(
                    f"VIDEOGROUND_SEED must be an integer: {env!r}") from exc
    if seed is not None:
        sections["train"]["seed"] = seed
    world = _build(WorldConfig, sections["world"], "world")
    model = _build(ModelConfig, sections["model"], "model")
    train = _build(TrainConfig, sections["train"], "train")
    return world, model, train


def _eval_episodes(world_cfg: WorldConfig, count: int, seed: int):
    rng = np.random.default_rng((seed, 3))
    return [W.generate_episode(world_cfg, rng) for _ in range(count)]


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    world_cfg, model_cfg, train_cfg = load_config(args.config, args.set,
                                                  args.seed)
    model = GroundingModel(model_cfg, world_cfg, train_cfg.seed)
    eval_eps = None
    if args.eval_every:
        eval_eps = _eval_episodes(world_cfg, args.eval_episodes,
                                  train_cfg.seed)
    losses = P.train(model, train_cfg, eval_every=args.eval_every,
                     eval_episodes=eval_eps, max_steps=args.max_steps)
    print(f"trained {len(losses)} steps; "
          f"first loss {losses[0]:.4f}, last loss {losses[-1]:.4f}")
    if args.checkpoint:
        P.save_checkpoint(args.checkpoint, model)
        print(f"checkpoint written to {args.checkpoint}")
    if args.loss_curve:
        Path(args.loss_curve).write_text(json.dumps(losses))
        print(f"loss curve written to {args.loss_curve}")
    return 0


def cmd_eval(args) -> int:
    model = P.load_checkpoint(args.checkpoint)
    if args.episodes:
        dump_cfg, episodes = W.load_episodes(args.episodes)
        if dump_cfg != model.world_cfg:
            raise CliError("episode dump world config does not match "
                           "the checkpoint's world config")
    else:
        episodes = _eval_episodes(model.world_cfg, args.count, args.seed or 0)
    report = metrics.evaluate(model, episodes, P.checkpoint_hash(model))
    print(report.as_table())
    if args.json:
        Path(args.json).write_text(report.to_json())
        print(f"report written to {args.json}")
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference check of a small end-to-end instance."""
    world_cfg = WorldConfig(frames=2, grid=(2, 2), dim=4, span_min=1,
                            span_max=1, noise_sigma=0.0)
    model_cfg = ModelConfig(dim=4, heads=2, n_encoder_iters=1,
                            n_decoder_layers=1, queries_per_frame=1,
                            sim_dim=4, proposal_scales=(2, 1))
    model = GroundingModel(model_cfg, world_cfg, seed=args.seed or 0)
    rng = np.random.default_rng(args.seed or 0)
    episode = W.generate_episode(world_cfg, rng)
    negative = W.generate_episode(world_cfg, rng)

    errors = {}
    mha = MultiHeadAttention(HeadConfig(2, 4), "probe", rng)
    q = T.Parameter("probe.q", rng.normal(size=(3, 4)))
    errors["attention"] = T.grad_check(
        lambda: T.tsum(mha(q, q, q)), [q] + mha.parameters())
    sim = R.SimilarityHead(4, 4, "probe_sim", rng)
    a = T.Parameter("probe.a", rng.normal(size=(1, 4)))
    b = T.Parameter("probe.b", rng.normal(size=(1, 4)))
    s = T.Parameter("probe.s", rng.normal(size=(1, 4)))
    errors["fine_loss"] = T.grad_check(
        lambda: R.loss_fine(sim, a, b, s, 0.2),
        [a, b, s] + sim.parameters())
    errors["end_to_end"] = T.grad_check(
        lambda: model.losses(episode, negative)[0], model.parameters())

    ok = True
    for name, err in errors.items():
        status = "ok" if err < args.tolerance else "FAIL"
        ok = ok and err < args.tolerance
        print(f"{name:>12}: max relative error {err:.3e}  [{status}]")
    return 0 if ok else 1


_ABLATION_FLAGS = {
    "full": {},
    "no-retrieval": {"use_retrieval": False},
    "no-pyramid": {"use_pyramid": False},
    "no-shifted": {"use_shifted": False},
    "no-hierarchical": {"use_hierarchical": False},
}


def cmd_ablate(args) -> int:
    world_cfg, model_cfg, train_cfg = load_config(args.config, args.set,
                                                  args.seed)
    variants = args.variants.split(",") if args.variants else \
        list(_ABLATION_FLAGS)
    unknown = set(variants) - set(_ABLATION_FLAGS)
    if unknown:
        raise CliError(f"unknown ablation variants: {sorted(unknown)} "
                       f"(choose from {sorted(_ABLATION_FLAGS)})")
    seeds = list(range(train_cfg.seed, train_cfg.seed + args.seeds))
    rows = []
    results = {}
    for variant in variants:
        cfg = dataclasses.replace(model_cfg, **_ABLATION_FLAGS[variant])
        accs = {a: [] for a in metrics.ALPHAS}
        for seed in seeds:
            tc = dataclasses.replace(train_cfg, seed=seed)
            model = GroundingModel(cfg, world_cfg, seed)
            P.train(model, tc, max_steps=args.steps)
            episodes = _eval_episodes(world_cfg, args.episodes, seed)
            report = metrics.evaluate(model, episodes)
            for a in metrics.ALPHAS:
                accs[a].append(report.accuracies[a])
        mean = {a: sum(v) / len(v) for a, v in accs.items()}
        avg = sum(mean.values()) / len(mean)
        rows.append((variant, mean, avg))
        results[variant] = {"accuracies": {str(a): mean[a]
                                           for a in metrics.ALPHAS},
                            "avg": avg, "seeds": seeds}
    header = f"{'variant':>16} {'0.4':>7} {'0.5':>7} {'0.6':>7} {'Avg':>7}"
    print(header)
    for variant, mean, avg in rows:
        print(f"{variant:>16} "
              + " ".join(f"{mean[a]:7.3f}" for a in metrics.ALPHAS)
              + f" {avg:7.3f}")
    if args.json:
        Path(args.json).write_text(json.dumps(results, sort_keys=True,
                                              indent=2))
        print(f"results written to {args.json}")
    return 0


def cmd_gen_data(args) -> int:
    world_cfg, _, train_cfg = load_config(args.config, args.set, args.seed)
    rng = np.random.default_rng((train_cfg.seed, 3))
    episodes = [W.generate_episode(world_cfg, rng)
                for _ in range(args.count)]
    W.save_episodes(args.out, world_cfg, episodes)
    print(f"wrote {args.count} episodes to {args.out}.json / {args.out}.npz")
    return 0


# -- argument parsing ---------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="YAML config file")
    sub.add_argument("--seed", type=int, default=None,
                     help="run seed (default: $VIDEOGROUND_SEED or config)")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videoground",
        description="Train and evaluate the synthetic-world video object "
                    "grounding model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="output checkpoint path (.npz)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=0,
                   help="steps between held-out evaluations (0 = never)")
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--loss-curve", help="write the loss curve as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", help="episode dump prefix (from gen-data)")
    p.add_argument("--count", type=int, default=200,
                   help="episodes to generate when no dump is given")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", help="write the machine-readable report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate",
                       help="train and compare component-ablated variants")
    _add_common(p)
    p.add_argument("--variants",
                   help="comma list from: " + ",".join(_ABLATION_FLAGS))
    p.add_argument("--steps", type=int, default=500,
                   help="training steps per variant")
    p.add_argument("--episodes", type=int, default=100,
                   help="held-out episodes per evaluation")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of seeds to average over")
    p.add_argument("--json", help="write the comparison as JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write a fixed episode dump")
    _add_common(p)
    p.add_argument("--out", required=True, help="dump path prefix")
    p.add_argument("--count", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
