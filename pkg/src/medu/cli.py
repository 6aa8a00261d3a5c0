"""Command line: ``medu {train,unlearn,sweep,adapt,verify-bounds}``.

Exit codes: 0 success, 1 runtime failure (including failed bound checks),
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata

import numpy as np

from . import _kernels
from .config import ExperimentConfig, load_config
from .errors import ConfigError, MeduError
from .experiment import (SUMMARY_COLUMNS, SWEEP_COLUMNS, adapt, bits_summary, codec_config, metrics, prepare,
                         retrain, summarize, sweep, target_user, train, verify_bounds, write_csv)
from .fl import CKPT_VERSION, load_checkpoint, save_checkpoint
from .store import VERSION as HISTORY_VERSION
from .store import MODE_MEDU, HistoryStore, storage_bits, storage_bound
from .unlearn import Timer, UnlearnReport, model_l2_distance, unlearn_full, unlearn_medu

log = logging.getLogger("medu")

MANIFEST = "manifest.json"
RAW_STORE = "history_raw.bin"
MEDU_STORE = "history_medu.bin"
MODEL_CKPT = "model.ckpt"
INIT_CKPT = "w0.ckpt"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def _provenance(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "package_version": _version(),
        "kernel_backend": _kernels.BACKEND,
        "seed": cfg.seed,
        "data_seed": cfg.effective_data_seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "format_versions": {"history": HISTORY_VERSION, "checkpoint": CKPT_VERSION},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def _config_from(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None) -> str:
    out = args.out or (cfg.out if cfg else None)
    if not out:
        raise ConfigError("--out is required")
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _run_config(run_dir: str) -> tuple[ExperimentConfig, dict]:
    path = os.path.join(run_dir, MANIFEST)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"no training run in {run_dir} (cannot read {MANIFEST}): {exc}") from exc
    return ExperimentConfig(**manifest["config"]).validate(), manifest


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from(args)
    out = _out_dir(args, cfg)
    if not (cfg.write_raw or cfg.write_medu):
        raise ConfigError("write_raw and write_medu are both false: nothing to store")
    sc = prepare(cfg)
    codecs = [codec_config(cfg, sc.seed)] if cfg.write_medu else []
    with Timer() as timer:
        tr = train(sc, codecs, raw=cfg.write_raw)
    save_checkpoint(os.path.join(out, MODEL_CKPT), tr.w_final)
    save_checkpoint(os.path.join(out, INIT_CKPT), tr.w0)
    files = [MODEL_CKPT, INIT_CKPT]
    storage = {"storage_fu_bits": cfg.U * (cfg.T + 1) * sc.M * 64}
    if tr.raw is not None:
        tr.raw.save(os.path.join(out, RAW_STORE))
        files.append(RAW_STORE)
        storage["raw"] = bits_summary(tr.raw, cfg.T)
    if tr.medu:
        tr.medu[0].save(os.path.join(out, MEDU_STORE))
        files.append(MEDU_STORE)
        b = bits_summary(tr.medu[0], cfg.T)
        b["overloads"] = tr.overloads[0]
        if "bound_bits" in b:
            b["within_bound"] = bool(b["paper_bits"] <= b["bound_bits"] * (1.0 + 1e-12))
        storage["medu"] = b
    manifest = _provenance(cfg, "train")
    manifest.update(M=sc.M, storage=storage, metrics=metrics(sc, tr.w_final), wall_time=timer.elapsed,
                    files={f: _sha256(os.path.join(out, f)) for f in files})
    _write_json(os.path.join(out, MANIFEST), manifest)
    log.info("trained M=%d over rounds 0..%d in %.1fs; wrote %s", sc.M, cfg.T, timer.elapsed, ", ".join(files))
    print(json.dumps(_jsonable({"out": out, "storage": storage, "metrics": manifest["metrics"]}), indent=2))
    return 0


def _unlearned_ckpt(run_dir, mode, user):
    return os.path.join(run_dir, f"unlearned_{mode}_u{user}.ckpt")


def cmd_unlearn(args) -> int:
    run_dir = args.out or (load_config(args.config).out if args.config else None)
    if not run_dir:
        raise ConfigError("--out (the training output directory) is required")
    cfg, manifest = _run_config(run_dir)
    user = target_user(cfg, args.unlearn_user)
    w0 = load_checkpoint(os.path.join(run_dir, INIT_CKPT))
    sc = prepare(cfg)
    etas = sc.fl.schedule.values(cfg.T)
    paper_bits = packed_bits = None
    overloads = 0
    with Timer() as timer:
        if args.mode == "fu":
            store = HistoryStore.load(os.path.join(run_dir, RAW_STORE))
            w = unlearn_full(w0, store, user, etas)
            paper_bits, packed_bits = storage_bits(store)
        elif args.mode == "medu":
            store = HistoryStore.load(os.path.join(run_dir, MEDU_STORE))
            w = unlearn_medu(w0, store, user, etas)
            paper_bits, packed_bits = storage_bits(store)
            overloads = manifest.get("storage", {}).get("medu", {}).get("overloads", 0)
        else:
            w = retrain(sc, user, w0=w0).w_final
    save_checkpoint(_unlearned_ckpt(run_dir, args.mode, user), w)
    extra = metrics(sc, w)
    dist = None
    rt_path = _unlearned_ckpt(run_dir, "retrain", user)
    if args.mode == "retrain":
        dist = 0.0
        for other in ("fu", "medu"):
            p = _unlearned_ckpt(run_dir, other, user)
            if os.path.exists(p):
                extra[f"dist_{other}_to_retrain"] = model_l2_distance(load_checkpoint(p), w)
    elif os.path.exists(rt_path):
        dist = model_l2_distance(w, load_checkpoint(rt_path))
    report = UnlearnReport(args.mode, user, w.tolist(), dist, paper_bits, packed_bits, overloads, timer.elapsed,
                           extra)
    rep = json.loads(report.to_json())
    rep["provenance"] = {"run_dir": run_dir, "config_sha256": manifest.get("config_sha256"),
                         "seed": manifest.get("seed"), "format_versions": manifest.get("format_versions")}
    _write_json(os.path.join(run_dir, f"report_{args.mode}_u{user}.json"), rep)
    summary = {k: rep[k] for k in ("mode", "user", "dist_to_retrain", "paper_bits", "packed_bits", "overloads",
                                   "wall_time", "metrics")}
    print(json.dumps(_jsonable(summary), indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from(args)
    if args.seed is not None:
        cfg = cfg.replace(sweep_seeds=[args.seed])
    out = _out_dir(args, cfg)
    with Timer() as timer:
        rows = sweep(cfg, args.unlearn_user)
    write_csv(os.path.join(out, "sweep.csv"), rows, SWEEP_COLUMNS)
    write_csv(os.path.join(out, "sweep_summary.csv"), summarize(rows), SUMMARY_COLUMNS)
    manifest = _provenance(cfg, "sweep")
    manifest.update(rows=len(rows), failed=sum(r["status"] != "ok" for r in rows), wall_time=timer.elapsed)
    _write_json(os.path.join(out, "manifest_sweep.json"), manifest)
    log.info("sweep wrote %d rows (%d failed) in %.1fs", len(rows), manifest["failed"], timer.elapsed)
    return 0 if manifest["failed"] < len(rows) else 1


def cmd_adapt(args) -> int:
    run_dir = args.out
    if not run_dir:
        raise ConfigError("--out (the training output directory) is required")
    cfg, manifest = _run_config(run_dir)
    user = target_user(cfg, args.unlearn_user)
    path = args.checkpoint or _unlearned_ckpt(run_dir, args.mode, user)
    try:
        params = load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read unlearned checkpoint {path}: {exc}") from exc
    rounds = cfg.adapt_rounds if args.rounds is None else args.rounds
    users = cfg.adapt_users if args.users is None else args.users
    sc = prepare(cfg)
    traj = adapt(sc, params, user, rounds, users)
    rep = {"mode": args.mode, "user": user, "checkpoint": path, "participants": sorted(users), "rounds": rounds,
           "accuracy": [m["primary_acc"] for m in traj], "backdoor_accuracy": [m["backdoor_acc"] for m in traj],
           "config_sha256": manifest.get("config_sha256")}
    _write_json(os.path.join(run_dir, f"adapt_{args.mode}_u{user}.json"), rep)
    print(json.dumps(_jsonable({k: rep[k] for k in ("mode", "user", "accuracy")}), indent=2))
    return 0


def _check_store(path) -> dict:
    """Decode a stored history end to end and check its storage figures."""
    from .codec import decode_rounds

    store = HistoryStore.load(path)
    h = store.header
    if store.mode == MODE_MEDU:
        for _ in decode_rounds(store):
            pass
    ideal, packed = storage_bits(store)
    T = len(store.rounds) - 1
    out = {"path": path, "rounds": len(store.rounds), "paper_bits": ideal, "packed_bits": packed}
    if store.mode == MODE_MEDU and not h.bypass:
        bound = storage_bound(h.U, h.Ubar, T, h.M, h.L, h.point_count())
        out.update(bound_bits=bound, **{"pass": bool(ideal <= bound * (1.0 + 1e-12))})
    return out


def cmd_verify_bounds(args) -> int:
    cfg = _config_from(args)
    out = _out_dir(args, cfg)
    stored = _check_store(args.store) if args.store else None
    with Timer() as timer:
        rep = verify_bounds(cfg, args.seeds, probe_exponents=args.probe_beta or ())
    rep.pop("samples")
    rep["stored_history"] = stored
    rep["provenance"] = _provenance(cfg, "verify-bounds")
    rep["wall_time"] = timer.elapsed
    _write_json(os.path.join(out, "verify.json"), rep)
    lines = {name: ("pass" if v["pass"] else "FAIL") for name, v in rep["verdicts"].items()}
    for p in rep["probes"]:
        lines[f"double_sum_p={p['p']:.3g}"] = f"{p['verdict']} (majorant {p['majorant_verdict']})"
    print(json.dumps(lines, indent=2))
    ok = rep["all_pass"] and (stored is None or stored.get("pass", True))
    return 0 if ok else 1


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medu", description="Federated unlearning from compressed gradient histories")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--out", default=None, help="output (or training run) directory")
        sp.add_argument("--unlearn-user", type=int, default=None, dest="unlearn_user", help="1-based user id")

    sp = sub.add_parser("train", help="train and write checkpoint, histories and manifest")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("unlearn", help="unlearn one user from a training run")
    common(sp, config_required=False)
    sp.add_argument("--mode", choices=["fu", "medu", "retrain"], required=True)
    sp.set_defaults(func=cmd_unlearn)

    sp = sub.add_parser("sweep", help="codec sweep; writes sweep.csv and sweep_summary.csv")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("adapt", help="extra federated rounds from an unlearned checkpoint")
    common(sp, config_required=False)
    sp.add_argument("--mode", choices=["fu", "medu", "retrain"], default="medu")
    sp.add_argument("--checkpoint", default=None, help="unlearned checkpoint (default: from the run directory)")
    sp.add_argument("--rounds", type=int, default=None)
    sp.add_argument("--users", type=int, nargs="+", default=None, help="participating user ids")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("verify-bounds", help="Monte Carlo check of the deviation and storage bounds")
    common(sp)
    sp.add_argument("--seeds", type=int, default=None, help="number of Monte Carlo seeds")
    sp.add_argument("--probe-beta", type=float, action="append", default=None,
                    help="extra exponent for the double-sum divergence probe (repeatable)")
    sp.add_argument("--store", default=None, help="also decode and check this stored history")
    sp.set_defaults(func=cmd_verify_bounds)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (MeduError, OSError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        log.exception("unexpected failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
