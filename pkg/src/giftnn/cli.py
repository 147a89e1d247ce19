"""Experiment orchestration: train, gift, eval, sweep, check.

One JSON document configures an experiment; flags override leaf fields by
dotted path. Every artifact embeds the resolved config, a content hash of the
package sources, and the run timestamp in a header field, so re-runs with the
same config and seeds produce byte-identical CSV bodies.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .data import (
    DATA_DIR_ENV,
    Dataset,
    load_mnist,
    subset,
    synthetic_linear,
    synthetic_teacher,
)
from .device import Device
from .gift import Direction, GiftConfig, estimate_direction, eval_in_situ, gift_run
from .model import (
    Architecture,
    Hyperrectangle,
    NoiseModel,
    Params,
    RngStream,
    STREAM_DATA,
    STREAM_ESTIMATE,
    STREAM_EVAL,
    STREAM_THEORY,
    mix64,
    load_params,
    save_params,
)
from .theory import (
    check_gaussian_product_cases,
    check_hierarchical_sampler,
    gradient_fd_check,
    linear_condition_bound,
)
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILURE = 3


class ConfigError(Exception):
    """Validation failure; carries messages that name config field paths."""

    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


class CheckFailure(Exception):
    pass


ARCH_PRESETS = {
    "shallow_mnist": [784, 500, 100, 100, 10],
    "deep_mnist": [784, 500, 250, 250, 100, 50, 10],
    "desk_small": [16, 32, 16, 4],
    "linear_example": [2, 1],
}

DEFAULT_CONFIG = {
    "name": "experiment",
    "arch": {"preset": "desk_small", "layer_dims": None, "activation": "tanh"},
    "data": {
        "kind": "synthetic_teacher",
        "dir": None,
        "n_train": 2000,
        "n_test": 500,
        "sigma_x": 1.0,
        "v": [0.3, -0.2],
        "seed": 0,
    },
    "train": {
        "s0": 0.2,
        "epochs": 40,
        "batch_size": 64,
        "eps0": 0.1,
        "decay_p": 0.75,
        "tau": 300.0,
        "projection": None,
    },
    "gift": {
        "eta": 0.02,
        "k1": 1000,
        "k2": 8,
        "max_steps": 25,
        "stop_rule": "either_worse",
        "est_k1": 500,
        "est_k2": 100,
        "normalize_direction": True,
        "fresh_eval_k2": 8,
    },
    "device": {"family": "gaussian_additive", "s_t": 0.3},
    "sweep": {
        "s0_grid": [0.05, 0.1, 0.2, 0.3],
        "st_grid": [0.05, 0.1, 0.2, 0.3],
        "families": ["gaussian_additive"],
        "workers": 1,
    },
    "seeds": [0, 1, 2, 3, 4],
    "out_dir": "runs/experiment",
}


def _deep_merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown config key")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _set_by_path(cfg: dict, dotted: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys[:-1]):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"{'.'.join(keys[: i + 1])}: unknown config key")
        if not isinstance(node[key], dict):
            raise ConfigError(f"{'.'.join(keys[: i + 1])}: not a config section")
        node = node[key]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"{dotted}: unknown config key")
    node[leaf] = value


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON in {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a JSON object")
        cfg = _deep_merge(cfg, loaded)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected dotted.path=value")
        dotted, raw = item.split("=", 1)
        _set_by_path(cfg, dotted, raw)
    if getattr(args, "data_dir", None):
        cfg["data"]["dir"] = args.data_dir
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    if getattr(args, "seeds", None):
        try:
            cfg["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError:
            raise ConfigError(f"seeds: expected a comma-separated integer list, got {args.seeds!r}")
    return cfg


class Experiment:
    """Typed view of a resolved config; construction validates everything."""

    def __init__(self, cfg: dict):
        errors = []
        self.raw = cfg

        arch_cfg = cfg["arch"]
        dims = arch_cfg.get("layer_dims")
        if dims is None:
            preset = arch_cfg.get("preset")
            if preset not in ARCH_PRESETS:
                errors.append(f"arch.preset: unknown preset {preset!r} (choices: {sorted(ARCH_PRESETS)})")
            else:
                dims = ARCH_PRESETS[preset]
        if dims is not None:
            try:
                self.arch = Architecture(tuple(dims), arch_cfg.get("activation", "tanh"))
            except ValueError as e:
                errors.append(f"arch.layer_dims: {e}")

        tr = cfg["train"]
        proj = tr.get("projection")
        projection = None
        if proj is not None:
            try:
                projection = Hyperrectangle(**proj)
            except (TypeError, ValueError) as e:
                errors.append(f"train.projection: {e}")
        try:
            self.train_config = TrainConfig(
                s0=tr["s0"],
                epochs=tr["epochs"],
                batch_size=tr["batch_size"],
                eps0=tr["eps0"],
                decay_p=tr["decay_p"],
                tau=tr["tau"],
                projection=projection,
            )
        except (ValueError, TypeError) as e:
            errors.append(f"train: {e}")

        g = cfg["gift"]
        try:
            self.gift_config = GiftConfig(
                eta=g["eta"],
                k1=g["k1"],
                k2=g["k2"],
                max_steps=g["max_steps"],
                stop_rule=g["stop_rule"],
            )
        except (ValueError, TypeError) as e:
            errors.append(f"gift: {e}")
        self.est_k1 = int(g.get("est_k1", g["k1"]))
        self.est_k2 = int(g.get("est_k2", g["k2"]))
        if self.est_k1 < 1 or self.est_k2 < 1:
            errors.append("gift.est_k1/est_k2: must be >= 1")
        self.normalize_direction = bool(g.get("normalize_direction", True))
        self.fresh_eval_k2 = int(g.get("fresh_eval_k2", g["k2"]))

        dev = cfg["device"]
        try:
            NoiseModel(dev["family"], dev["s_t"])
        except (ValueError, TypeError) as e:
            errors.append(f"device: {e}")
        self.device_family = dev["family"]
        self.device_s_t = dev["s_t"]

        data_cfg = cfg["data"]
        if data_cfg["kind"] not in ("mnist", "synthetic_teacher", "synthetic_linear"):
            errors.append(f"data.kind: unknown kind {data_cfg['kind']!r}")
        if data_cfg["kind"] == "mnist" and not (data_cfg.get("dir") or os.environ.get(DATA_DIR_ENV)):
            errors.append(f"data.dir: required for kind 'mnist' (or set {DATA_DIR_ENV})")
        if int(data_cfg["n_train"]) < 1 or int(data_cfg["n_test"]) < 1:
            errors.append("data.n_train/n_test: must be >= 1")
        self.data_cfg = data_cfg

        seeds = cfg.get("seeds") or []
        if not seeds:
            errors.append("seeds: must be a nonempty list")
        self.seeds = [int(s) for s in seeds] if seeds else []

        sw = cfg["sweep"]
        for fam in sw["families"]:
            try:
                NoiseModel(fam, 0.1)
            except ValueError as e:
                errors.append(f"sweep.families: {e}")
        for field in ("s0_grid", "st_grid"):
            if not sw[field] or any(not (float(s) > 0) for s in sw[field]):
                errors.append(f"sweep.{field}: must be a nonempty list of positive levels")
        self.sweep_cfg = sw

        self.name = cfg.get("name", "experiment")
        self.out_dir = cfg["out_dir"]
        if errors:
            raise ConfigError(errors)

    def datasets(self):
        """(train, test) datasets per the data block."""
        dc = self.data_cfg
        kind = dc["kind"]
        n_train, n_test = int(dc["n_train"]), int(dc["n_test"])
        rng = RngStream(int(dc.get("seed", 0)), STREAM_DATA)
        if kind == "mnist":
            try:
                train_full = load_mnist(dc.get("dir"), train=True)
                test_full = load_mnist(dc.get("dir"), train=False)
            except FileNotFoundError as e:
                raise ConfigError(f"data.dir: {e}")
            return subset(train_full, n_train, rng), subset(test_full, n_test, rng.child(1))
        if kind == "synthetic_linear":
            pool = synthetic_linear(np.asarray(dc["v"], dtype=float), dc["sigma_x"], n_train + n_test, rng)
        else:
            pool = synthetic_teacher(self.arch, n_train + n_test, dc["sigma_x"], rng)
        train_ds = Dataset(pool.inputs[:n_train], pool.targets[:n_train], name=pool.name, split="train")
        test_ds = Dataset(pool.inputs[n_train:], pool.targets[n_train:], name=pool.name, split="test")
        return train_ds, test_ds


def code_hash() -> str:
    """Content hash of the installed package sources."""
    root = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for fn in sorted(filenames):
            if fn.endswith(".py"):
                rel = os.path.relpath(os.path.join(dirpath, fn), root)
                digest.update(rel.encode())
                with open(os.path.join(dirpath, fn), "rb") as f:
                    digest.update(f.read())
    return digest.hexdigest()[:12]


def _meta(cfg: dict) -> dict:
    blob = json.dumps(cfg, sort_keys=True)
    return {
        "version": __version__,
        "code_hash": code_hash(),
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest()[:16],
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": cfg,
    }


def write_csv(path, fieldnames, rows, meta: dict):
    """Meta (with timestamp) goes on a comment header line; the body below it is
    deterministic for a fixed config and seeds."""
    os.makedirs(os.path.dirname(path), exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _plain(v) for k, v in row.items()})
    with open(path, "w") as f:
        f.write("# meta " + json.dumps(meta, sort_keys=True) + "\n")
        f.write(buf.getvalue())


def read_csv_body(path):
    """(header_meta, rows) for an artifact produced by write_csv."""
    with open(path) as f:
        first = f.readline()
        meta = json.loads(first[len("# meta "):]) if first.startswith("# meta ") else None
        rows = list(csv.DictReader(f))
    return meta, rows


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_json(path, payload: dict):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def _device_seed(seed: int, family: str, s_t: float) -> int:
    tag = int.from_bytes(hashlib.sha256(f"{family}:{s_t!r}".encode()).digest()[:8], "big")
    return mix64(seed ^ mix64(tag))


def _train_one(exp: Experiment, train_ds, seed: int):
    from dataclasses import replace

    cfg = replace(exp.train_config, seed=seed)
    return train(exp.arch, cfg, train_ds)


def _estimate_one(exp: Experiment, params, train_ds, s0: float, seed: int) -> Direction:
    direction = estimate_direction(
        params, train_ds, s0, exp.est_k1, exp.est_k2, RngStream(seed, STREAM_ESTIMATE)
    )
    if exp.normalize_direction:
        n = direction.norm()
        if n > 0:
            direction = direction.scaled(1.0 / n)
    return direction


def _gift_one(exp: Experiment, w0: Params, direction: Direction, test_ds,
              family: str, s_t: float, seed: int):
    """One fine-tuning run plus an independent paired re-evaluation on the full
    test subset (fresh noise slot, shared between w0 and w_f)."""
    device = Device(exp.arch, w0, NoiseModel(family, s_t), seed=_device_seed(seed, family, s_t))
    trace = gift_run(device, w0, direction, exp.gift_config, test_ds,
                     RngStream(_device_seed(seed, family, -s_t), STREAM_EVAL))
    n_test = len(test_ds)
    idx = np.arange(n_test)
    slot = device.new_slot()
    rng = RngStream(seed, STREAM_EVAL)
    fresh_base = eval_in_situ(device, w0, test_ds, n_test, exp.fresh_eval_k2, rng,
                              data_indices=idx, noise_slot=slot)
    fresh_post = eval_in_situ(device, trace.w_f, test_ds, n_test, exp.fresh_eval_k2, rng,
                              data_indices=idx, noise_slot=slot)
    return trace, fresh_base, fresh_post


def _gift_row(exp, family, s0, s_t, seed, trace, fresh_base, fresh_post) -> dict:
    base, sel = trace.baseline, trace.improvement
    acc_eps = 1e-12
    return {
        "family": family,
        "s0": s0,
        "s_t": s_t,
        "seed": seed,
        "baseline_loss": base.loss,
        "post_loss": base.loss - sel,
        "loss_improvement": sel,
        "rel_loss_improvement": sel / base.loss if base.loss > 0 else 0.0,
        "baseline_acc": base.accuracy,
        "post_acc": next((r.accuracy for i, s, r in trace.records if (i, s) == trace.selected), base.accuracy),
        "fresh_baseline_loss": fresh_base.loss,
        "fresh_post_loss": fresh_post.loss,
        "fresh_loss_improvement": fresh_base.loss - fresh_post.loss,
        "fresh_baseline_acc": fresh_base.accuracy,
        "fresh_post_acc": fresh_post.accuracy,
        "fresh_acc_change": fresh_post.accuracy - fresh_base.accuracy,
        "fresh_rel_acc_improvement": (fresh_post.accuracy - fresh_base.accuracy) / max(fresh_base.accuracy, acc_eps),
        "selected_step": trace.selected[0],
        "selected_sign": trace.selected[1],
        "gift_steps": trace.steps_taken,
        "stop_reason": trace.stop_reason,
        "device_queries": trace.queries,
        "direction_norm": trace.direction_norm,
    }


GIFT_FIELDS = [
    "family", "s0", "s_t", "seed",
    "baseline_loss", "post_loss", "loss_improvement", "rel_loss_improvement",
    "baseline_acc", "post_acc",
    "fresh_baseline_loss", "fresh_post_loss", "fresh_loss_improvement",
    "fresh_baseline_acc", "fresh_post_acc", "fresh_acc_change", "fresh_rel_acc_improvement",
    "selected_step", "selected_sign", "gift_steps", "stop_reason", "device_queries", "direction_norm",
]


def cmd_train(exp: Experiment) -> int:
    train_ds, _ = exp.datasets()
    meta = _meta(exp.raw)
    out = os.path.join(exp.out_dir, "train")
    for seed in exp.seeds:
        params, history = _train_one(exp, train_ds, seed)
        seed_dir = os.path.join(out, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        save_params(params, os.path.join(seed_dir, "params.npz"))
        rows = [
            {"step": s, "epoch": e, "eps": eps, "loss": loss}
            for s, e, eps, loss in zip(history.steps, history.epochs, history.eps, history.losses)
        ]
        write_csv(os.path.join(seed_dir, "train_log.csv"), ["step", "epoch", "eps", "loss"], rows, meta)
        smoothed = history.smoothed()
        write_json(os.path.join(seed_dir, "checkpoint.json"), {
            "meta": meta,
            "seed": seed,
            "steps": len(history.steps),
            "final_loss": history.losses[-1],
            "smoothed_initial": smoothed[0],
            "smoothed_final": smoothed[-1],
        })
        print(f"train seed {seed}: steps {len(history.steps)}, "
              f"smoothed loss {smoothed[0]:.4f} -> {smoothed[-1]:.4f} ({seed_dir})")
    return EXIT_OK


def _load_checkpoint(exp: Experiment, checkpoint_root: str | None, train_ds, seed: int) -> Params:
    if checkpoint_root is None:
        params, _ = _train_one(exp, train_ds, seed)
        return params
    path = os.path.join(checkpoint_root, f"seed_{seed}", "params.npz")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint: missing params for seed {seed}: {path}")
    params = load_params(path)
    if params.arch.layer_dims != exp.arch.layer_dims:
        raise ConfigError(
            f"checkpoint: params dims {params.arch.layer_dims} do not match arch.layer_dims {exp.arch.layer_dims}"
        )
    return params


def cmd_gift(exp: Experiment, checkpoint_root: str | None) -> int:
    train_ds, test_ds = exp.datasets()
    meta = _meta(exp.raw)
    out = os.path.join(exp.out_dir, "gift")
    rows = []
    s0 = exp.train_config.s0
    family, s_t = exp.device_family, exp.device_s_t
    for seed in exp.seeds:
        w0 = _load_checkpoint(exp, checkpoint_root, train_ds, seed)
        direction = _estimate_one(exp, w0, train_ds, s0, seed)
        trace, fresh_base, fresh_post = _gift_one(exp, w0, direction, test_ds, family, s_t, seed)
        rows.append(_gift_row(exp, family, s0, s_t, seed, trace, fresh_base, fresh_post))
        seed_dir = os.path.join(out, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        save_params(trace.w_f, os.path.join(seed_dir, "params_final.npz"))
        write_json(os.path.join(seed_dir, "gift_trace.json"), {
            "meta": meta,
            "seed": seed,
            "baseline": vars(trace.baseline),
            "candidates": [
                {"i": i, "sign": s, **vars(rep)} for i, s, rep in trace.records
            ],
            "selected": list(trace.selected),
            "improvement": trace.improvement,
            "steps_taken": trace.steps_taken,
            "queries": trace.queries,
            "stop_reason": trace.stop_reason,
            "eta": trace.eta,
            "direction_norm": trace.direction_norm,
        })
        print(f"gift seed {seed}: loss {trace.baseline.loss:.5f} -> "
              f"{trace.baseline.loss - trace.improvement:.5f} "
              f"(improvement {trace.improvement:.5f}, steps {trace.steps_taken})")
    write_csv(os.path.join(out, "gift_summary.csv"), GIFT_FIELDS, rows, meta)
    return EXIT_OK


def cmd_eval(exp: Experiment, checkpoint_root: str | None) -> int:
    train_ds, test_ds = exp.datasets()
    meta = _meta(exp.raw)
    rows = []
    for seed in exp.seeds:
        params = _load_checkpoint(exp, checkpoint_root, train_ds, seed)
        device = Device(exp.arch, params, NoiseModel(exp.device_family, exp.device_s_t),
                        seed=_device_seed(seed, exp.device_family, exp.device_s_t))
        report = eval_in_situ(device, params, test_ds, exp.gift_config.k1, exp.gift_config.k2,
                              RngStream(seed, STREAM_EVAL))
        rows.append({
            "seed": seed,
            "family": exp.device_family,
            "s_t": exp.device_s_t,
            "loss": report.loss,
            "loss_se": report.loss_se,
            "accuracy": report.accuracy,
            "accuracy_se": report.accuracy_se,
            "k1": report.k1,
            "k2": report.k2,
        })
        print(f"eval seed {seed}: loss {report.loss:.5f} +/- {report.loss_se:.5f}, "
              f"acc {report.accuracy:.4f}")
    write_csv(os.path.join(exp.out_dir, "eval", "eval.csv"),
              list(rows[0].keys()), rows, meta)
    return EXIT_OK


def _sweep_task(cfg_json: str, family: str, s0: float, seed: int):
    """All s_t cells for one (family, s0, seed); self-contained for worker pools."""
    exp = Experiment(json.loads(cfg_json))
    train_ds, test_ds = exp.datasets()
    from dataclasses import replace

    exp.train_config = replace(exp.train_config, s0=s0, seed=seed)
    w0, _ = train(exp.arch, exp.train_config, train_ds)
    direction = _estimate_one(exp, w0, train_ds, s0, seed)
    rows = []
    for s_t in exp.sweep_cfg["st_grid"]:
        trace, fresh_base, fresh_post = _gift_one(exp, w0, direction, test_ds, family, float(s_t), seed)
        rows.append(_gift_row(exp, family, s0, float(s_t), seed, trace, fresh_base, fresh_post))
    return rows


def cmd_sweep(exp: Experiment) -> int:
    meta = _meta(exp.raw)
    sw = exp.sweep_cfg
    cfg_json = json.dumps(exp.raw)
    tasks = [
        (family, float(s0), seed)
        for family in sw["families"]
        for s0 in sw["s0_grid"]
        for seed in exp.seeds
    ]
    workers = int(sw.get("workers", 1))
    failures = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_task, *zip(*[(cfg_json, f, s, sd) for f, s, sd in tasks])))
    else:
        results = []
        for family, s0, seed in tasks:
            try:
                results.append(_sweep_task(cfg_json, family, s0, seed))
            except Exception as e:  # keep sweeping; record the cell failure
                failures.append({"family": family, "s0": s0, "seed": seed, "error": str(e)})
                results.append([])
    rows = [row for chunk in results for row in chunk]

    agg_rows = []
    for family in sw["families"]:
        for s0 in sw["s0_grid"]:
            for s_t in sw["st_grid"]:
                cell = [r for r in rows
                        if r["family"] == family and r["s0"] == float(s0) and r["s_t"] == float(s_t)]
                if not cell:
                    continue
                agg = {"family": family, "s0": float(s0), "s_t": float(s_t), "n_seeds": len(cell)}
                for col in ("rel_loss_improvement", "loss_improvement",
                            "fresh_rel_acc_improvement", "fresh_acc_change",
                            "fresh_baseline_acc", "fresh_post_acc",
                            "baseline_loss", "fresh_loss_improvement"):
                    vals = np.array([float(r[col]) for r in cell])
                    agg[f"mean_{col}"] = float(vals.mean())
                    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
                    agg[f"ci95_{col}"] = float(1.96 * se)
                agg_rows.append(agg)

    out = os.path.join(exp.out_dir, "sweep")
    write_csv(os.path.join(out, "sweep_rows.csv"), GIFT_FIELDS, rows, meta)
    if agg_rows:
        write_csv(os.path.join(out, "sweep_aggregate.csv"), list(agg_rows[0].keys()), agg_rows, meta)
    write_json(os.path.join(out, "sweep.json"), {
        "meta": meta,
        "n_rows": len(rows),
        "failures": failures,
        "non_degradation": bool(all(float(r["loss_improvement"]) >= 0.0 for r in rows)),
    })
    print(f"sweep: {len(rows)} rows, {len(agg_rows)} cells, {len(failures)} failures ({out})")
    return EXIT_OK


def cmd_check(exp_or_out) -> int:
    out_dir = exp_or_out if isinstance(exp_or_out, str) else exp_or_out.out_dir
    checks = []

    worst = check_gaussian_product_cases(50, RngStream(2025, STREAM_THEORY))
    checks.append({"name": "gaussian_product_derivative", "passed": worst < 1e-6,
                   "worst_rel_error": worst, "tolerance": 1e-6})

    reps = [check_hierarchical_sampler(100, 100, 20, RngStream(7, STREAM_THEORY)),
            check_hierarchical_sampler(1000, 100, 20, RngStream(8, STREAM_THEORY))]
    ok = all(r["all_within_4se"] for r in reps) and reps[1]["mean_abs_error"] < reps[0]["mean_abs_error"]
    checks.append({"name": "hierarchical_sampler", "passed": bool(ok),
                   "mean_abs_errors": [r["mean_abs_error"] for r in reps],
                   "se_pred": [r["se_pred"] for r in reps]})

    b1 = linear_condition_bound([0.3, -0.4], 1e-9, 1.0)
    b2 = linear_condition_bound([1.0], 1.0, 1.0)
    b3 = linear_condition_bound([0.6, -0.8], 0.5, 1.0)
    b4 = linear_condition_bound([1.2, -1.6], 0.5, 1.0)
    ok = abs(b1 - 1.0) < 1e-6 and abs(b2 - 1.0) < 1e-12 and abs(b3 - 2 * b4) < 1e-12
    checks.append({"name": "linear_condition_bound", "passed": bool(ok),
                   "values": [b1, b2, b3, b4]})

    worst = gradient_fd_check(20, RngStream(2026, STREAM_THEORY))
    checks.append({"name": "gradient_finite_difference", "passed": worst < 1e-5,
                   "worst_rel_error": worst, "tolerance": 1e-5})

    payload = {"checks": checks, "all_passed": bool(all(c["passed"] for c in checks))}
    if out_dir:
        write_json(os.path.join(out_dir, "check", "checks.json"), payload)
    for c in checks:
        print(f"check {c['name']}: {'pass' if c['passed'] else 'FAIL'}")
    if not payload["all_passed"]:
        raise CheckFailure("one or more checks failed")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="giftnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train checkpoints under the presumed noise level"),
        ("gift", "estimate a direction and fine-tune against the device"),
        ("eval", "evaluate checkpoints on the device"),
        ("sweep", "run the (family, s0, s_t, seed) grid and aggregate"),
        ("check", "run the numeric verification suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--data-dir", dest="data_dir", help=f"dataset directory (or ${DATA_DIR_ENV})")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config leaf by dotted path (JSON value)")
        if name in ("gift", "eval"):
            p.add_argument("--checkpoint", help="train output dir with seed_*/params.npz")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "check":
            cfg = resolve_config(args)
            return cmd_check(cfg["out_dir"] if (args.config or args.out) else "")
        exp = Experiment(resolve_config(args))
        if args.command == "train":
            return cmd_train(exp)
        if args.command == "gift":
            return cmd_gift(exp, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(exp, args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(exp)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except CheckFailure as e:
        print(f"check failure: {e}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
