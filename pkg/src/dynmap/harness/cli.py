"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``); explicit
flags override config values.  Exit codes: 0 success, 1 validation error
(bad flags, malformed config, missing fields), 2 runtime error.  Each run
writes a reproducibility stamp with the config digest, seeds and the hashes
of the artifacts it read and wrote.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..tasks import ConfigurationError, RandomizationSpec, TaskId

log = logging.getLogger("dynmap")

REQUIRED = object()


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _json_list(text):
    return json.loads(text) if text.strip().startswith("[") else [v for v in text.split(",") if v]


def _int_list(text):
    return [int(v) for v in _json_list(text)]


# key: (argparse type, default, help); REQUIRED marks mandatory keys
COMMON_TRAIN = {
    "dataset": (str, REQUIRED, "dataset directory"),
    "out": (str, REQUIRED, "output directory"),
    "model": (str, "spec", "architecture: 'spec', 'desk' or a JSON object in the config"),
    "epochs": (int, None, "training epochs (regime default when omitted)"),
    "batch_size": (int, 8, "sequences per minibatch"),
    "lr": (float, 3e-4, "Adam learning rate"),
    "window": (int, None, "sequence window (full episodes when omitted)"),
}

SCHEMAS = {
    "gen-expert": {
        "task": (str, REQUIRED, "BalanceReaching, BalanceReachingV2 or BinDropping"),
        "out": (str, REQUIRED, "output directory for PPO checkpoints"),
        "randomization": (str, "reduced", "'reduced' or 'full'"),
        "total_steps": (int, None, "environment steps"),
        "seed": (int, 0, "training seed"),
        "ppo": (None, {}, "PPOConfig overrides (config file only)"),
    },
    "gen-dataset": {
        "task": (str, REQUIRED, "task id"),
        "out": (str, REQUIRED, "dataset directory"),
        "n_train": (int, 100, "training trajectories"),
        "n_eval": (int, 50, "evaluation trajectories"),
        "randomization": (str, "full", "'reduced' or 'full'"),
        "expert": (str, "scripted", "'scripted' or 'ppo'"),
        "expert_checkpoints": (_json_list, [], "PPO checkpoint files (expert=ppo)"),
        "seed": (int, 0, "sampling seed"),
    },
    "train-wm": {**COMMON_TRAIN,
                 "weights": (str, "rgb", "loss preset (rgb, p, v, a, pv, pva) or object in config"),
                 "seed": (int, 0, "initialization seed")},
    "train-policy": {**COMMON_TRAIN,
                     "wm": (str, REQUIRED, "frozen world-model checkpoint"),
                     "policy": (str, "feedforward", "feedforward or recurrent"),
                     "seeds": (_int_list, [0, 1, 2], "policy seeds"),
                     "cache_dir": (str, None, "latent cache directory (default: <out>/cache)")},
    "train-joint": {**COMMON_TRAIN,
                    "weights": (str, "rgb", "loss preset or object in config"),
                    "policy": (str, "feedforward", "feedforward or recurrent"),
                    "seeds": (_int_list, [0, 1, 2], "model seeds")},
    "train-e2e": {**COMMON_TRAIN,
                  "policy": (str, "feedforward", "feedforward or recurrent"),
                  "seeds": (_int_list, [0, 1, 2], "model seeds")},
    "eval": {
        "dataset": (str, REQUIRED, "dataset directory (eval split is used)"),
        "checkpoints": (_json_list, REQUIRED, "policy or combined checkpoints, one per seed"),
        "episodes": (int, 50, "episodes per seed"),
        "seeds": (_int_list, None, "seed labels for the checkpoints"),
        "out": (str, None, "report directory"),
    },
    "replay": {
        "dataset": (str, REQUIRED, "dataset directory"),
        "split": (str, "eval", "train or eval"),
        "frames": (str, None, "export PNG frames of the first trajectory here"),
        "out": (str, None, "report directory"),
    },
    "gradcheck": {
        "seed": (int, 0, "seed for random inputs"),
        "out": (str, None, "report directory"),
    },
    "validate-dataset": {
        "dataset": (str, REQUIRED, "dataset directory"),
        "out": (str, None, "report directory"),
    },
}

HELP = {
    "gen-expert": "train a state-based PPO expert",
    "gen-dataset": "record expert demonstrations into a dataset directory",
    "train-wm": "decoupled world-model training",
    "train-policy": "decoupled policy training on frozen latents",
    "train-joint": "joint training of world model and policy",
    "train-e2e": "end-to-end training with the policy loss only",
    "eval": "closed-loop evaluation (DR / PE / SR)",
    "replay": "open-loop replay of recorded actions",
    "gradcheck": "finite-difference gradient checks",
    "validate-dataset": "checksums, round-trip, success and inverse checks",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynmap", description="World models with dynamics mapping: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"dynmap {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--stamp", help="reproducibility stamp path (default: <out>/stamp_<command>.json)")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key, (typ, default, text) in schema.items():
            if typ is None:
                continue
            flag = "--" + key.replace("_", "-")
            shown = "required" if default is REQUIRED else f"default {default}"
            sp.add_argument(flag, dest=key, type=typ, default=None, help=f"{text} ({shown})")
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config, then explicit flags."""
    schema = SCHEMAS[command]
    cfg = {k: v[1] for k, v in schema.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config: file {args.config} not found") from None
        except ValueError as exc:
            raise ValidationError(f"config: malformed JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ValidationError("config: top level must be an object")
        unknown = set(loaded) - set(schema)
        if unknown:
            raise ValidationError(f"config: unknown field(s) {sorted(unknown)}")
        cfg.update(loaded)
    for key in schema:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    missing = [k for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise ValidationError(f"missing required field(s): {', '.join(missing)}")
    return cfg


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _hash_paths(paths) -> dict:
    from .formats import sha256_file
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256_file(p)
        elif p.is_dir() and (p / "manifest.json").exists():
            out[str(p)] = json.loads((p / "manifest.json").read_text()).get("content_hash")
    return out


def write_stamp(path, command: str, cfg: dict, argv, inputs=(), outputs=(), extra=None):
    stamp = {
        "command": command, "argv": list(argv), "config": cfg, "config_digest": _digest(cfg),
        "seeds": {k: cfg[k] for k in ("seed", "seeds") if k in cfg},
        "inputs": _hash_paths(inputs), "outputs": _hash_paths(outputs),
        "version": __version__, "python": platform.python_version(), "numpy": np.__version__,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stamp, indent=1, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------- helpers

def _task(cfg) -> TaskId:
    try:
        return TaskId(cfg["task"])
    except ValueError:
        raise ValidationError(f"task: unknown task {cfg['task']!r}; choose from "
                              f"{[t.value for t in TaskId]}") from None


def _spec(name: str) -> RandomizationSpec:
    if name not in ("reduced", "full"):
        raise ValidationError(f"randomization: expected 'reduced' or 'full', got {name!r}")
    return RandomizationSpec().reduced() if name == "reduced" else RandomizationSpec()


def _dataset(cfg):
    from .formats import Dataset
    path = Path(cfg["dataset"])
    if not (path / "manifest.json").exists():
        raise ValidationError(f"dataset: no dataset manifest at {path}")
    return Dataset(path)


def _train_config(cfg, regime: str):
    from ..worldmodel import LossWeights, WorldModelConfig
    from .training import TrainConfig

    model = cfg.get("model", "spec")
    if isinstance(model, dict):
        model = WorldModelConfig.from_dict(model)
    elif model == "desk":
        model = WorldModelConfig.desk()
    elif model == "spec":
        model = WorldModelConfig()
    else:
        raise ValidationError(f"model: expected 'spec', 'desk' or an object, got {model!r}")
    weights = cfg.get("weights", "rgb")
    try:
        weights = LossWeights(**weights) if isinstance(weights, dict) else LossWeights.preset(weights)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"weights: {exc}") from None
    if regime == "e2e":
        weights = LossWeights(w_P=0.0, w_V=0.0, w_A=0.0)
    return TrainConfig(regime=regime, weights=weights, model=model,
                       policy=cfg.get("policy", "feedforward"), lr=cfg["lr"], epochs=cfg["epochs"],
                       batch_size=cfg["batch_size"], window=cfg["window"],
                       seeds=tuple(cfg.get("seeds") or (cfg.get("seed", 0),)),
                       wm_checkpoint=cfg.get("wm"))


# ---------------------------------------------------------------- commands

def cmd_gen_expert(cfg):
    from ..expert.ppo import PPOConfig, ppo_train, save_checkpoint, select_checkpoints

    task, spec = _task(cfg), _spec(cfg["randomization"])
    kw = dict(cfg.get("ppo") or {})
    if cfg["total_steps"] is not None:
        kw["total_steps"] = cfg["total_steps"]
    for k in ("hidden", "accel_scale"):
        if k in kw:
            kw[k] = tuple(kw[k])
    try:
        pcfg = PPOConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"ppo: {exc}") from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cks = ppo_train(task, pcfg, spec, seed=cfg["seed"], log_path=out / "ppo_log.tsv")
    paths = []
    for ck in cks:
        p = out / f"ppo_step{ck.step:07d}.dmnn"
        save_checkpoint(p, ck)
        paths.append(p)
    chosen = select_checkpoints(cks)
    sel = [str(out / f"ppo_step{c.step:07d}.dmnn") for c in chosen]
    (out / "selected.json").write_text(json.dumps(sel, indent=1) + "\n")
    print(f"{len(cks)} checkpoints, selected {len(sel)}; final return {cks[-1].mean_return:.2f}, "
          f"probe SR {cks[-1].success_rate:.0f}%")
    return [], paths


def cmd_gen_dataset(cfg):
    from ..expert.recorder import record_dataset
    from ..expert.scripted import expert_variants

    task, spec = _task(cfg), _spec(cfg["randomization"])
    if cfg["expert"] == "scripted":
        experts, inputs = expert_variants(task), []
    elif cfg["expert"] == "ppo":
        from ..expert.ppo import load_checkpoint
        if not cfg["expert_checkpoints"]:
            raise ValidationError("expert_checkpoints: required when expert is 'ppo'")
        experts = [load_checkpoint(p).policy(task) for p in cfg["expert_checkpoints"]]
        inputs = cfg["expert_checkpoints"]
    else:
        raise ValidationError(f"expert: expected 'scripted' or 'ppo', got {cfg['expert']!r}")
    if cfg["n_train"] < 1 or cfg["n_eval"] < 0:
        raise ValidationError("n_train must be >= 1 and n_eval >= 0")
    m = record_dataset(experts, task, cfg["n_train"], cfg["n_eval"], spec, cfg["out"], seed=cfg["seed"])
    print(f"recorded {m.n_train} train + {m.n_eval} eval trajectories "
          f"({m.extra.get('attempts')} attempts) -> {cfg['out']}")
    return inputs, [cfg["out"]]


def cmd_train_wm(cfg):
    from .training import train_decoupled_wm

    ds = _dataset(cfg)
    tc = _train_config(cfg, "decoupled_wm")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    res = train_decoupled_wm(ds, tc, seed=cfg["seed"], out_path=out / "worldmodel.dmnn",
                             log_path=out / "wm_loss.csv")
    print(f"world model -> {res.checkpoint} (final loss {res.final_loss:.4f})")
    return [cfg["dataset"]], [res.checkpoint, res.log_path]


def cmd_train_policy(cfg):
    from .training import policy_loss_cached, load_sequences, precompute_latents, train_policy_frozen

    ds = _dataset(cfg)
    if not Path(cfg["wm"]).is_file():
        raise ValidationError(f"wm: checkpoint {cfg['wm']} not found")
    tc = _train_config(cfg, "decoupled_policy").validate()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cache = precompute_latents(ds, cfg["wm"], cfg["cache_dir"] or out / "cache", expect=None)
    data = load_sequences(ds, "train")
    held = load_sequences(ds, "eval") if ds.entries("eval") else None
    written = []
    for seed in tc.seeds:
        res = train_policy_frozen(cache, ds, tc, seed=seed, out_path=out / f"policy_seed{seed}.dmnn",
                                  log_path=out / f"policy_loss_seed{seed}.csv", data=data)
        msg = f"seed {seed}: train L_pi {res.final_loss:.4f}"
        if held is not None:
            msg += f", held-out L_pi {policy_loss_cached(res.policy, cache, held):.4f}"
        print(msg)
        written += [res.checkpoint, res.log_path]
    return [cfg["dataset"], cfg["wm"]], written


def _cmd_combined(cfg, regime):
    from .training import train_e2e, train_joint

    ds = _dataset(cfg)
    tc = _train_config(cfg, regime)
    fn = train_joint if regime == "joint" else train_e2e
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in tc.seeds:
        res = fn(ds, tc, seed=seed, out_path=out / f"{regime}_seed{seed}.dmnn",
                 log_path=out / f"{regime}_loss_seed{seed}.csv")
        print(f"seed {seed}: final loss {res.final_loss:.4f}")
        written += [res.checkpoint, res.log_path]
    return [cfg["dataset"]], written


def cmd_eval(cfg):
    from .evaluate import evaluate

    ds = _dataset(cfg)
    cks = cfg["checkpoints"]
    if not cks:
        raise ValidationError("checkpoints: at least one checkpoint is required")
    for c in cks:
        if not Path(c).is_file():
            raise ValidationError(f"checkpoints: {c} not found")
    if cfg["episodes"] < 1:
        raise ValidationError("episodes: must be >= 1")
    m = evaluate(cks, ds, cfg["episodes"], cfg["seeds"], cfg["out"])
    print(m)
    outs = [Path(cfg["out"]) / "episodes.csv", Path(cfg["out"]) / "summary.csv"] if cfg["out"] else []
    return [cfg["dataset"], *cks], outs


def cmd_replay(cfg):
    from ..render import export_frames
    from .evaluate import replay_dataset

    ds = _dataset(cfg)
    if cfg["split"] not in ("train", "eval"):
        raise ValidationError(f"split: expected train or eval, got {cfg['split']!r}")
    m = replay_dataset(ds, cfg["split"])
    print(m)
    outs = []
    if cfg["frames"]:
        entries = ds.entries(cfg["split"])
        if entries:
            outs += export_frames(ds.load(entries[0]).to_records(), cfg["frames"])
    if cfg["out"]:
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        m.write_csv(Path(cfg["out"]) / "replay.csv")
        outs.append(Path(cfg["out"]) / "replay.csv")
    return [cfg["dataset"]], outs


class _CheckFailed(RuntimeError):
    pass


def cmd_gradcheck(cfg):
    from .checks import run_all

    reports = run_all(cfg["seed"])
    bad = []
    for name, r in reports.items():
        print(f"{name:32s} max rel. err {r.max_error:.2e}  {'ok' if r.passed else 'FAIL'}")
        if not r.passed:
            bad.append(name)
    if cfg["out"]:
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        (Path(cfg["out"]) / "gradcheck.json").write_text(json.dumps(
            {k: {"max_error": r.max_error, "tolerance": r.tolerance, "errors": r.errors}
             for k, r in reports.items()}, indent=1))
    if bad:
        raise _CheckFailed(f"gradient checks failed: {', '.join(bad)}")
    return [], []


def cmd_validate_dataset(cfg):
    from .validate import validate_dataset

    if not Path(cfg["dataset"]).is_dir():
        raise ValidationError(f"dataset: directory {cfg['dataset']} not found")
    rep = validate_dataset(cfg["dataset"])
    print(rep)
    if not rep.ok:
        raise ValidationError(f"dataset: {len(rep.errors)} problem(s) found")
    return [cfg["dataset"]], []


COMMANDS = {
    "gen-expert": cmd_gen_expert, "gen-dataset": cmd_gen_dataset, "train-wm": cmd_train_wm,
    "train-policy": cmd_train_policy, "train-joint": lambda c: _cmd_combined(c, "joint"),
    "train-e2e": lambda c: _cmd_combined(c, "e2e"), "eval": cmd_eval, "replay": cmd_replay,
    "gradcheck": cmd_gradcheck, "validate-dataset": cmd_validate_dataset,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        inputs, outputs = COMMANDS[args.command](cfg)
        status = 0
    except (ValidationError, ConfigurationError) as exc:
        print(f"dynmap {args.command}: validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit status 2
        print(f"dynmap {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        cfg = locals().get("cfg")
        if cfg is None:
            return 2
        inputs, outputs, status = [], [], 2
    stamp = args.stamp or (Path(cfg["out"]) / f"stamp_{args.command}.json" if cfg.get("out")
                           else Path(f"stamp_{args.command}.json"))
    write_stamp(stamp, args.command, cfg, argv, inputs, [o for o in outputs if o], {"exit": status})
    return status


if __name__ == "__main__":
    sys.exit(main())
