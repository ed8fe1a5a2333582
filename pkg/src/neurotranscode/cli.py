"""Command-line pipeline: simulate -> preprocess -> train -> transcode ->
train-bp -> backproject -> eval, plus the hrf-probe utility.

Commands compose through files only. Each one resolves its configuration
from defaults, an optional flat config file, and flag overrides, runs under
a single seed, and writes a run record with digests of everything it
emitted, so identical config+seed reproduces identical outputs.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import backprojector, datamodel, evaluate, simulate, storage, transcoder
from .config import ConfigError, RunConfig, RunRecord
from .datamodel import DataError
from .storage import FormatError
from .tensor import TensorError

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training diverged or an output came back non-finite."""


DEFAULTS = {
    "simulate": {
        "seed": 0,
        "subjects": 3,
        "sessions_per_subject": 2,
        "duration_s": 210.0,
        "world": "smooth",
        "coarse_grid": "8,9,8",
        "spatial_factor": 2,
        "tr_seconds": 2.1,
        "noise_eeg": 0.02,
        "noise_fmri": 0.02,
        "p_oddball": 0.2,
        "iti_lo": 2.0,
        "iti_hi": 3.0,
        "spread_mm": 12.0,
        "leadfield_jitter": 0.15,
        "background_components": 4,
        "background_sd": 0.25,
    },
    "preprocess": {
        "seed": 0,
        "study": "",
        "window": 300,
        "step": 150,
        "time_factor": 175,
        "tr_upsample": 6,
        "standardize": True,
    },
    "train": {
        "seed": 0,
        "data": "",
        "hold_out": "",
        "epochs": 500,
        "lr": 1e-3,
        "linear": False,
        "spatial_k": 3,
        "temporal_k": 9,
        "spatial_width": 8,
        "temporal_width": 8,
        "init_noise": 1e-2,
        "checkpoint_every": 0,
        "log_every": 25,
    },
    "transcode": {
        "seed": 0,
        "model": "",
        "eeg": "",
        "fmri": "",
    },
    "train-bp": {
        "seed": 0,
        "model": "",
        "data": "",
        "sessions": "",
        "kind": "",
        "epochs": 50,
        "lr": 1e-2,
        "width": 4,
        "depth": 3,
        "ksize": 3,
        "linear": False,
        "init_noise": 1e-2,
    },
    "backproject": {
        "seed": 0,
        "model": "",
        "bp": "",
        "data": "",
        "session": "",
        "kind": "",
    },
    "eval": {
        "seed": 0,
        "model": "",
        "data": "",
        "study": "",
        "sessions": "",
        "alpha": 0.05,
        "hrf": False,
    },
    "hrf-probe": {
        "seed": 0,
        "model": "",
        "cover_s": 32.0,
        "tr_seconds": 2.1,
    },
}

REQUIRED = {
    "simulate": (),
    "preprocess": ("study",),
    "train": ("data",),
    "transcode": ("model",),
    "train-bp": ("model", "data"),
    "backproject": ("model", "bp", "data", "session"),
    "eval": ("model",),
    "hrf-probe": ("model",),
}


def _require(config, command):
    for key in REQUIRED[command]:
        if not config[key]:
            raise ConfigError(f"{command} needs {key!r} (flag or config file)")


def _grid(text):
    parts = tuple(int(v) for v in str(text).split(","))
    if len(parts) != 3:
        raise ConfigError(f"expected a 3-axis grid like '8,9,8', got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# preprocessed-data manifest
# ---------------------------------------------------------------------------


def _load_prep(data_dir):
    data_dir = Path(data_dir)
    path = data_dir / "prep.txt"
    if not path.exists():
        raise DataError(f"no preprocessed manifest at {path}")
    manifest = storage.load_kv(path)
    records = []
    for name in manifest["prep.sessions"].split(","):
        if not name:
            continue
        rec = {"name": name, "subject": manifest[f"session.{name}.subject"]}
        for field in ("eeg_tr", "fmri_tr", "eeg_std", "fmri_std", "schedule"):
            rec[field] = data_dir / manifest[f"session.{name}.{field}"]
        rec["windows"] = [
            (data_dir / f"{name}.w{int(s):04d}.eeg.tnsr",
             data_dir / f"{name}.w{int(s):04d}.fmri.tnsr")
            for s in manifest[f"session.{name}.windows"].split(";") if s
        ]
        records.append(rec)
    if not records:
        raise DataError(f"{path}: no sessions listed")
    return manifest, records


def _window_batches(records):
    batches = []
    for rec in records:
        for eeg_path, fmri_path in rec["windows"]:
            batches.append(transcoder.TrainBatch(
                storage.load_tensor(eeg_path),
                storage.load_tensor(fmri_path),
            ))
    return batches


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(config, out, record):
    simulate.build_study(
        out,
        subjects=config["subjects"],
        sessions_per_subject=config["sessions_per_subject"],
        duration_s=config["duration_s"],
        world=config["world"],
        coarse_grid=_grid(config["coarse_grid"]),
        spatial_factor=config["spatial_factor"],
        tr_seconds=config["tr_seconds"],
        noise_eeg=config["noise_eeg"],
        noise_fmri=config["noise_fmri"],
        iti_range=(config["iti_lo"], config["iti_hi"]),
        p_oddball=config["p_oddball"],
        spread_mm=config["spread_mm"],
        leadfield_jitter=config["leadfield_jitter"],
        background_components=config["background_components"],
        background_sd=config["background_sd"],
        seed=config["seed"],
    )
    log.info("study written to %s", out)


def cmd_preprocess(config, out, record):
    study = simulate.Study(config["study"])
    time_factor = config["time_factor"]
    tr_upsample = config["tr_upsample"]
    manifest = {
        "prep.spatial_factor": str(study.spatial_factor),
        "prep.source_grid": "{},{},{}".format(*study.coarse_grid),
        "prep.tr_seconds": repr(study.tr_seconds),
        "prep.window": str(config["window"]),
        "prep.step": str(config["step"]),
        "prep.time_factor": str(time_factor),
        "prep.tr_upsample": str(tr_upsample),
        "prep.sessions": ",".join(study.sessions),
    }
    storage.save_mapping(out / "layout.txt", study.layout.mapping)
    manifest["prep.layout"] = "layout.txt"
    for name in study.sessions:
        eeg = study.load_eeg(name)
        fmri = study.load_fmri(name)
        frame = round(fmri.tr_seconds * eeg.sample_rate_hz)
        if frame != time_factor * tr_upsample:
            raise DataError(
                f"{name}: one TR spans {frame} EEG samples, which "
                f"{time_factor} x {tr_upsample} resampling cannot bridge"
            )
        pp = datamodel.preprocess_session(
            eeg, fmri, study.spatial_factor,
            time_factor=time_factor, tr_upsample=tr_upsample,
            zscore=config["standardize"],
        )
        for field in ("eeg_tr", "fmri_tr", "eeg_std", "fmri_std"):
            storage.save_tensor(out / f"{name}.{field}.tnsr", pp[field])
            manifest[f"session.{name}.{field}"] = f"{name}.{field}.tnsr"
        starts = datamodel.window_starts(
            pp["eeg_tr"].shape[-1], config["window"], config["step"])
        for start in starts:
            sl = slice(start, start + config["window"])
            storage.save_tensor(out / f"{name}.w{start:04d}.eeg.tnsr",
                                pp["eeg_tr"][..., sl])
            storage.save_tensor(out / f"{name}.w{start:04d}.fmri.tnsr",
                                pp["fmri_tr"][..., sl])
        manifest[f"session.{name}.windows"] = ";".join(str(s) for s in starts)
        datamodel.save_schedule(out / f"{name}.schedule.txt",
                                study.load_schedule(name))
        manifest[f"session.{name}.schedule"] = f"{name}.schedule.txt"
        manifest[f"session.{name}.subject"] = study.subject(name)
    storage.save_kv(out / "prep.txt", manifest)
    log.info("preprocessed %d sessions into %s", len(study.sessions), out)


def cmd_train(config, out, record):
    manifest, records = _load_prep(config["data"])
    if config["hold_out"]:
        records, held = transcoder.loso_split(records, config["hold_out"])
        log.info("holding out %d sessions of %s", len(held), config["hold_out"])
    batches = _window_batches(records)
    mapping = storage.load_mapping(
        Path(config["data"]) / manifest["prep.layout"])
    params = transcoder.init_params(
        mapping,
        source_grid=_grid(manifest["prep.source_grid"]),
        spatial_k=config["spatial_k"],
        temporal_k=config["temporal_k"],
        spatial_width=config["spatial_width"],
        temporal_width=config["temporal_width"],
        linear=config["linear"],
        seed=config["seed"],
        init_noise=config["init_noise"],
    )
    params, history = transcoder.train(
        batches, params,
        epochs=config["epochs"], lr=config["lr"], seed=config["seed"],
        checkpoint_every=config["checkpoint_every"],
        checkpoint_dir=out / "checkpoints",
        log_every=config["log_every"],
    )
    transcoder.save_checkpoint(out / "model", params, extra={
        "train.hold_out": config["hold_out"],
        "train.epochs": str(config["epochs"]),
        "train.windows": str(len(batches)),
    })
    evaluate.write_history_csv(out / "history.csv", history)
    if history and history[-1].get("diverged"):
        raise NumericalError(
            f"training diverged at epoch {history[-1]['epoch']}; "
            "the checkpoint holds the last finite epoch"
        )


def cmd_transcode(config, out, record):
    if bool(config["eeg"]) == bool(config["fmri"]):
        raise ConfigError("transcode needs exactly one of eeg/fmri inputs")
    params = transcoder.load_checkpoint(config["model"])
    if config["eeg"]:
        volume = storage.load_tensor(config["eeg"])
        result = transcoder.transcode_eeg_to_fmri(params, volume)
        target = out / "fmri_hat.tnsr"
    else:
        volume = storage.load_tensor(config["fmri"])
        result = transcoder.transcode_fmri_to_eeg(params, volume)
        target = out / "eeg_hat.tnsr"
    if not np.isfinite(result).all():
        raise NumericalError("transcoded output contains non-finite values")
    storage.save_tensor(target, result)
    log.info("wrote %s %s", target, result.shape)


def _prep_geometry(manifest):
    factor = int(manifest["prep.spatial_factor"])
    tr = float(manifest["prep.tr_seconds"])
    return factor, tr


def _session_inputs(rec):
    eeg_std = storage.load_tensor(rec["eeg_std"]).astype(np.float32)
    fmri_std = storage.load_tensor(rec["fmri_std"]).astype(np.float32)
    schedule = datamodel.load_schedule(rec["schedule"])
    return eeg_std, fmri_std, schedule


def cmd_train_bp(config, out, record):
    params = transcoder.load_checkpoint(config["model"])
    manifest, records = _load_prep(config["data"])
    if config["sessions"]:
        wanted = [s for s in config["sessions"].split(",") if s]
        by_name = {rec["name"]: rec for rec in records}
        missing = [w for w in wanted if w not in by_name]
        if missing:
            raise DataError(f"unknown sessions: {', '.join(missing)}")
        records = [by_name[w] for w in wanted]
    factor, tr = _prep_geometry(manifest)
    kind = config["kind"] or None
    bp = backprojector.init_bp_params(
        spatial_factor=factor,
        ksize=config["ksize"], width=config["width"], depth=config["depth"],
        linear=config["linear"], seed=config["seed"],
        init_noise=config["init_noise"],
    )
    for rec in records:
        eeg_std, fmri_std, schedule = _session_inputs(rec)
        channels, eeg_ref, fmri_ref = backprojector.prepare_session(
            params, eeg_std, fmri_std, schedule, factor,
            kind=kind, tr_seconds=tr,
        )
        bp, history = backprojector.train_backprojector(
            bp, channels, eeg_ref, fmri_ref,
            epochs=config["epochs"], lr=config["lr"], seed=config["seed"],
        )
        evaluate.write_history_csv(out / f"bp_history.{rec['name']}.csv",
                                   history)
        backprojector.save_bp_checkpoint(out / f"bp.{rec['name']}", bp)
        if history and history[-1].get("diverged"):
            raise NumericalError(
                f"backprojector diverged on session {rec['name']}")
        log.info("session %s final loss %.6g", rec["name"],
                 history[-1]["total"])
    backprojector.save_bp_checkpoint(out / "bp", bp)


def cmd_backproject(config, out, record):
    params = transcoder.load_checkpoint(config["model"])
    bp = backprojector.load_bp_checkpoint(config["bp"])
    manifest, records = _load_prep(config["data"])
    by_name = {rec["name"]: rec for rec in records}
    if config["session"] not in by_name:
        raise DataError(f"unknown session {config['session']!r}")
    rec = by_name[config["session"]]
    factor, tr = _prep_geometry(manifest)
    eeg_std, fmri_std, schedule = _session_inputs(rec)
    channels, _, _ = backprojector.prepare_session(
        params, eeg_std, fmri_std, schedule, factor,
        kind=config["kind"] or None, tr_seconds=tr,
    )
    integrated = backprojector.backproject(bp, channels).data
    if not np.isfinite(integrated).all():
        raise NumericalError("integrated source contains non-finite values")
    storage.save_tensor(out / f"{rec['name']}.integrated.tnsr", integrated)
    storage.save_tensor(out / f"{rec['name']}.channels.tnsr", channels)
    log.info("integrated source %s", integrated.shape)


def _eval_session(params, rec, study, out, alpha, summary):
    name = rec["name"]
    eeg_tr = storage.load_tensor(rec["eeg_tr"]).astype(np.float32)
    fmri_tr = storage.load_tensor(rec["fmri_tr"]).astype(np.float32)
    f_native = np.ascontiguousarray(fmri_tr[..., ::transcoder.TEMPORAL_FACTOR])

    ehat = transcoder.transcode_fmri_to_eeg(params, f_native)
    extent = min(ehat.shape[-1], eeg_tr.shape[-1])
    flat = params.eeg_flat_indices()
    e_true = eeg_tr.reshape(-1, eeg_tr.shape[-1])[flat, :extent]
    e_est = ehat.reshape(-1, ehat.shape[-1])[flat, :extent]
    tests = [evaluate.pearson_r(e_est[c], e_true[c])
             for c in range(len(flat))]
    report = evaluate.bonferroni_report(tests, alpha)
    evaluate.write_correlation_csv(out / f"{name}.eeg_corr.csv", report)
    summary[f"{name}.eeg_median_r"] = repr(float(np.median(report.r_values)))
    summary[f"{name}.eeg_significant"] = str(report.significant_count)
    summary[f"{name}.eeg_threshold"] = repr(report.threshold)

    T = eeg_tr.shape[-1] - eeg_tr.shape[-1] % transcoder.TEMPORAL_FACTOR
    fhat = transcoder.transcode_eeg_to_fmri(params, eeg_tr[..., :T])
    frames = min(fhat.shape[-1], f_native.shape[-1])
    rmap = evaluate.pearson_r_map(fhat[..., :frames], f_native[..., :frames])
    evaluate.write_rmap_csv(out / f"{name}.fmri_rmap.csv", rmap)
    summary[f"{name}.fmri_median_r"] = repr(float(np.median(rmap)))

    if study is not None:
        gt = study.load_truth(name)
        truth = gt.source_training_res().astype(np.float32)
        est = transcoder.fmri_decode(params, f_native).data
        span = min(truth.shape[-1], est.shape[-1])
        metrics = evaluate.source_recovery_metrics(
            est[..., :span], truth[..., :span], gt.active_mask())
        evaluate.write_rmap_csv(out / f"{name}.source_rmap.csv",
                                metrics["r_map"])
        summary[f"{name}.source_median_active_r"] = repr(
            metrics["median_active_r"])
        summary[f"{name}.source_hit_rate"] = repr(metrics["hit_rate"])


def cmd_eval(config, out, record):
    params = transcoder.load_checkpoint(config["model"])
    summary = {}
    if config["hrf"]:
        estimate = evaluate.hrf_probe(params)
        evaluate.write_hrf_csv(out / "hrf.csv", estimate)
        summary["hrf.peak_time_s"] = repr(estimate.peak_time_s)
        summary["hrf.peak_value"] = repr(estimate.peak_value)
        summary["hrf.undershoot_time_s"] = repr(estimate.undershoot_time_s)
        if estimate.warning:
            log.warning("%s", estimate.warning)
            summary["hrf.warning"] = estimate.warning
    if config["data"]:
        _, records = _load_prep(config["data"])
        if config["sessions"]:
            wanted = {s for s in config["sessions"].split(",") if s}
            records = [r for r in records if r["name"] in wanted]
            if not records:
                raise DataError("no sessions left to evaluate")
        study = simulate.Study(config["study"]) if config["study"] else None
        for rec in records:
            _eval_session(params, rec, study, out, config["alpha"], summary)
    if not config["hrf"] and not config["data"]:
        raise ConfigError("eval needs data (and optionally study) or hrf=true")
    storage.save_kv(out / "summary.txt", summary)


def cmd_hrf_probe(config, out, record):
    params = transcoder.load_checkpoint(config["model"])
    estimate = evaluate.hrf_probe(params, cover_seconds=config["cover_s"],
                                  tr_seconds=config["tr_seconds"])
    evaluate.write_hrf_csv(out / "hrf.csv", estimate)
    features = {
        "peak_time_s": repr(estimate.peak_time_s),
        "peak_value": repr(estimate.peak_value),
        "undershoot_time_s": repr(estimate.undershoot_time_s),
        "undershoot_value": repr(estimate.undershoot_value),
    }
    if estimate.warning:
        log.warning("%s", estimate.warning)
        features["warning"] = estimate.warning
    storage.save_kv(out / "hrf_features.txt", features)


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "transcode": cmd_transcode,
    "train-bp": cmd_train_bp,
    "backproject": cmd_backproject,
    "eval": cmd_eval,
    "hrf-probe": cmd_hrf_probe,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors, not numerical ones
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--out", help="run directory (default: timestamp+seed)")
    sub.add_argument("--seed", type=int)


def _flag_name(key):
    return "--" + key.replace("_", "-")


_FLAG_TYPES = {int: int, float: float, str: str}


def build_parser():
    parser = _Parser(prog="neurotranscode",
                     description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True,
                                 parser_class=_Parser)
    for command, defaults in DEFAULTS.items():
        sub = subs.add_parser(command)
        _add_common(sub)
        for key, default in defaults.items():
            if key == "seed":
                continue
            if isinstance(default, bool):
                group = sub.add_mutually_exclusive_group()
                group.add_argument(_flag_name(key), dest=key,
                                   action="store_const", const=True)
                group.add_argument(_flag_name("no_" + key), dest=key,
                                   action="store_const", const=False)
            else:
                sub.add_argument(_flag_name(key), dest=key,
                                 type=_FLAG_TYPES[type(default)])
    return parser


def _overrides(args, defaults):
    out = {}
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _run_dir(args, config, command):
    if args.out:
        return Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path("runs") / f"{command}-{stamp}-seed{config['seed']}"


def _finish(record, config, out):
    config.write_resolved(out / "config.txt")
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "run_record.txt":
            record.add(path)
    record.write()


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    record = None
    try:
        config = RunConfig(DEFAULTS[command], args.config,
                           _overrides(args, DEFAULTS[command]))
        _require(config, command)
        out = _run_dir(args, config, command)
        out.mkdir(parents=True, exist_ok=True)
        record = RunRecord(command, config, out)
        COMMANDS[command](config, out, record)
        _finish(record, config, out)
        return 0
    except NumericalError as exc:
        if record is not None:
            _finish(record, config, out)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, FormatError, TensorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
