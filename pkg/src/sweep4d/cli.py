"""Command-line pipeline: phantom -> pseudolabel -> train -> predict ->
reconstruct -> evaluate, plus `pipeline` to run every stage from one config.

Each stage is idempotent given identical inputs and seed, writes its
effective (defaults-merged) config next to its outputs, and drops a
provenance file with the tool version, config hash and seed.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, breath, experiments, metrics, phantom, srnn, srrecon, volume
from .errors import ConfigError, DataError, NumericError

DEFAULT_CONFIG = {
    "seed": 0,
    "phantom": {
        "kind": "sweep",  # sweep | table1
        "dims": [96, 96, 120],
        "spacing": [1.0, 1.0, 1.0],
        "texture_amplitude": 0.05,
        "K": 5,
        "cycles": 8,
        "slices_per_state": 8,
        "period_jitter": 0.15,
        "amp_range": [1.0, 1.0],
        "drift_amp": 0.0,
        "hold_prob": 0.0,
        "hold_len": [0.5, 1.5],
        "breathing": {
            "period_s": 4.0,
            "amp_mm": 6.0,
            "shell_scale": 0.05,
            "waveform": "sinusoid",
            "drift_rate": 0.0,
            "level_gamma": 1.5,
        },
        "acquisition": {
            "slice_time_s": 0.490,
            "sweep_rate_mm_s": 0.17,
            "slice_thickness_mm": 4.0,
            "n_slices": 200,
            "z_start_mm": 0.0,
            "noise_sigma": 0.02,
        },
    },
    "signal": {
        "reference_sigma": None,  # None -> estimated from peak-spacing regularity
        "min_separation": None,  # None -> derived from reference sigma
        "min_prominence": None,  # None -> robust fraction of the NCC amplitude
        "K": 5,
    },
    "train": {
        "lr": 0.01,
        "weight_decay": 0.01,
        "epochs": 60,
        "batch_size": 32,
        "window": 20,
        "stride": 19,
        "hidden": 64,
        "layers": 3,
        "lr_decay": "cosine",
    },
    "recon": {
        "tv_weights": [0.01, 0.01, 0.1],
        "epochs": 5000,
        "lr": None,
        "mode": "direct",
        "labels": "srnn",  # which labels file feeds reconstruct: pseudo | srnn | gt
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(value, dict) and isinstance(out[key], dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        return _merge(DEFAULT_CONFIG, user)
    except ConfigError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()[:16]


def write_provenance(out_dir, config) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "provenance.json", "w") as fh:
        json.dump({
            "tool": "sweep4d",
            "version": __version__,
            "config_hash": config_hash(config),
            "seed": config["seed"],
        }, fh, indent=1)
    with open(out_dir / "effective_config.json", "w") as fh:
        json.dump(config, fh, indent=1)


# ---------------------------------------------------------------------------
# stages


def run_phantom(config, out_dir) -> dict:
    out_dir = Path(out_dir)
    pc = config["phantom"]
    seed = config["seed"]
    spec = phantom.PhantomSpec(
        dims=tuple(pc["dims"]), spacing=tuple(pc["spacing"]),
        texture_amplitude=pc["texture_amplitude"], seed=seed,
    )
    model = phantom.BreathingModel(seed=seed, **pc["breathing"])
    vol, description = phantom.make_phantom(spec)
    if pc["kind"] == "table1":
        stack, gt, prov = phantom.make_table1_dataset(
            phantom_spec=spec, K=pc["K"], cycles=pc["cycles"],
            slices_per_state=pc["slices_per_state"],
            period_jitter=pc["period_jitter"],
            amp_range=tuple(pc["amp_range"]),
            drift_amp=pc["drift_amp"],
            hold_prob=pc["hold_prob"],
            hold_len=tuple(pc["hold_len"]),
            seed=seed, breathing=model,
        )
    elif pc["kind"] == "sweep":
        acq = phantom.AcquisitionSpec(seed=seed, **pc["acquisition"])
        stack, gt = phantom.acquire_sweep(vol, model, acq, num_states=pc["K"])
        prov = {"kind": "sweep", "n_slices": acq.n_slices}
    else:
        raise ConfigError(f"unknown phantom kind {pc['kind']!r}")
    volume.write_stack(stack, out_dir / "stack")
    volume.write_volume(vol, out_dir / "ground_truth")
    breath.write_labels(gt, out_dir / "gt.labels.json")
    # per-state ground-truth volumes for downstream comparisons
    for state in range(pc["K"]):
        level = (state + 0.5) / pc["K"]
        sv = phantom.deform_at_level(vol, model, level)
        volume.write_volume(sv, out_dir / f"gt_state_{state}")
    with open(out_dir / "phantom.json", "w") as fh:
        json.dump({"description": description, "dataset": prov}, fh, indent=1)
    write_provenance(out_dir, config)
    return {"stack": str(out_dir / "stack"), "T": stack.T}


def run_pseudolabel(config, stack_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    sc = config["signal"]
    stack = volume.read_stack(stack_path)
    sigma = sc["reference_sigma"]
    if sigma is None:
        sigma = breath.estimate_reference_sigma(stack)
    ref = breath.gaussian_reference(stack, sigma)
    series = breath.ncc_series(stack, ref, sigma)
    min_sep = sc["min_separation"]
    if min_sep is None:
        min_sep = max(2, int(round(0.6 * sigma)))
    peaks = breath.detect_peaks(series, min_sep, sc["min_prominence"])
    labeling = breath.pseudo_labels(series, peaks, sc["K"])
    out_dir.mkdir(parents=True, exist_ok=True)
    breath.write_labels(labeling, out_dir / "pseudo.labels.json")
    series.to_csv(out_dir / "ncc.csv")
    with open(out_dir / "signal.json", "w") as fh:
        json.dump({
            "reference_sigma": float(sigma),
            "min_separation": int(min_sep),
            "n_peaks": int(len(peaks.peak_indices)),
            "peak_indices": [int(i) for i in peaks.peak_indices],
        }, fh, indent=1)
    write_provenance(out_dir, config)
    return {"labels": str(out_dir / "pseudo.labels.json")}


def run_train(config, stack_path, labels_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    tc = config["train"]
    stack = volume.read_stack(stack_path)
    labeling = breath.read_labels(labels_path)
    if labeling.T != stack.T:
        raise DataError("labels do not cover the stack")
    cfg = srnn.TrainConfig(
        lr=tc["lr"], weight_decay=tc["weight_decay"], epochs=tc["epochs"],
        batch_size=tc["batch_size"], seed=config["seed"], window=tc["window"],
        stride=tc["stride"], hidden=tc["hidden"], layers=tc["layers"],
        lr_decay=tc["lr_decay"], num_states=labeling.num_states,
    )
    windows = srnn.build_windows(stack, labeling, cfg.window, cfg.stride)
    model, history = srnn.train_srnn(windows, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "checkpoint")
    with open(out_dir / "history.json", "w") as fh:
        json.dump(history, fh, indent=1)
    write_provenance(out_dir, config)
    return {"checkpoint": str(out_dir / "checkpoint"),
            "best_val_accuracy": history["best_val_accuracy"]}


def run_predict(config, stack_path, checkpoint_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    stack = volume.read_stack(stack_path)
    model = srnn.BiLstmModel.load(checkpoint_path)
    labeling = srnn.predict_states(model, stack, W=config["train"]["window"])
    out_dir.mkdir(parents=True, exist_ok=True)
    breath.write_labels(labeling, out_dir / "srnn.labels.json")
    write_provenance(out_dir, config)
    return {"labels": str(out_dir / "srnn.labels.json")}


def run_reconstruct(config, stack_path, labels_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    rc = config["recon"]
    stack = volume.read_stack(stack_path)
    labeling = breath.read_labels(labels_path)
    psf = srrecon.PsfSpec(fwhm_mm=stack.slice_thickness)
    cfg = srrecon.SrLossConfig(
        tv_weights=tuple(rc["tv_weights"]), epochs=rc["epochs"],
        lr=rc["lr"], mode=rc["mode"],
    )
    volumes, manifest = srrecon.reconstruct_4d(stack, labeling, None, psf, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    for state, vol in volumes.items():
        volume.write_volume(vol, out_dir / f"state_{state}")
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    write_provenance(out_dir, config)
    return {"manifest": str(out_dir / "manifest.json"),
            "states": sorted(volumes)}


def run_evaluate(config, workdir, out_dir) -> dict:
    """Fidelity and classification metrics for a pipeline working directory."""
    workdir = Path(workdir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = volume.read_stack(workdir / "phantom" / "stack")
    results: dict = {}

    gt_path = workdir / "phantom" / "gt.labels.json"
    rows = []
    if gt_path.exists():
        gt = breath.read_labels(gt_path)
        for name, rel in (("pseudo", "signal/pseudo.labels.json"),
                          ("srnn", "predict/srnn.labels.json")):
            p = workdir / rel
            if not p.exists():
                continue
            report = metrics.classification_report(breath.read_labels(p), gt)
            report.metadata["labels"] = name
            report.write_json(out_dir / f"classification_{name}.json")
            results[f"accuracy_{name}"] = report.accuracy
            rows.append([name, report.accuracy, report.adjacent_accuracy])
    if rows:
        metrics.write_csv_rows(out_dir / "classification.csv", rows,
                               header=["labels", "accuracy", "adjacent_accuracy"])

    manifest_path = workdir / "recon" / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        labels_path = workdir / ("predict/srnn.labels.json"
                                 if (workdir / "predict/srnn.labels.json").exists()
                                 else "signal/pseudo.labels.json")
        labeling = breath.read_labels(labels_path)
        psf = srrecon.PsfSpec(fwhm_mm=stack.slice_thickness)
        fidelity_rows = []
        for state_key, entry in manifest["states"].items():
            if entry.get("status") != "ok":
                continue
            state = int(state_key)
            vol = volume.read_volume(workdir / "recon" / f"state_{state}")
            selected = stack.subset(entry["slice_indices"])
            model = srrecon.ForwardModel(selected, vol, psf)
            simulated = srrecon.simulate_slices(vol, model)
            p = metrics.psnr(simulated, selected.data)
            s = metrics.ssim(simulated, selected.data)
            fidelity_rows.append([state, p, s, entry["slice_fraction"]])
            results.setdefault("fidelity", {})[state] = {
                "psnr": p if np.isfinite(p) else "inf", "ssim": s,
                "slice_fraction": entry["slice_fraction"],
            }
        metrics.write_csv_rows(
            out_dir / "fidelity.csv", fidelity_rows,
            header=["state", "psnr_db", "ssim", "slice_fraction"])
        results["fidelity_metric"] = "psnr/ssim between simulate_slices(V) " \
                                     "and the selected slices"
    with open(out_dir / "evaluation.json", "w") as fh:
        json.dump(results, fh, indent=1)
    write_provenance(out_dir, config)
    return results


def run_pipeline(config, workdir, keep_going=False) -> dict:
    workdir = Path(workdir)
    summary = {}
    stages = [
        ("phantom", lambda: run_phantom(config, workdir / "phantom")),
        ("pseudolabel", lambda: run_pseudolabel(
            config, workdir / "phantom" / "stack", workdir / "signal")),
        ("train", lambda: run_train(
            config, workdir / "phantom" / "stack",
            workdir / "signal" / "pseudo.labels.json", workdir / "train")),
        ("predict", lambda: run_predict(
            config, workdir / "phantom" / "stack",
            workdir / "train" / "checkpoint", workdir / "predict")),
        ("reconstruct", lambda: run_reconstruct(
            config, workdir / "phantom" / "stack",
            workdir / _recon_labels_rel(config), workdir / "recon")),
        ("evaluate", lambda: run_evaluate(config, workdir, workdir / "eval")),
    ]
    for name, stage in stages:
        try:
            summary[name] = stage()
        except (ConfigError, DataError, NumericError) as exc:
            summary[name] = {"error": str(exc)}
            if not keep_going:
                raise
    write_provenance(workdir, config)
    return summary


def _recon_labels_rel(config) -> str:
    which = config["recon"]["labels"]
    return {
        "pseudo": "signal/pseudo.labels.json",
        "srnn": "predict/srnn.labels.json",
        "gt": "phantom/gt.labels.json",
    }.get(which) or _bad_labels(which)


def _bad_labels(which):
    raise ConfigError(f"recon.labels must be pseudo, srnn or gt, got {which!r}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sweep4d",
        description="Respiratory-motion-resolved 4D reconstruction pipeline",
    )
    parser.add_argument("--config", help="JSON config (defaults merged in)")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numeric paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a breathing phantom dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pseudolabel", help="NCC peak analysis pseudo labels")
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the respiratory-state classifier")
    p.add_argument("--stack", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="predict per-slice respiratory states")
    p.add_argument("--stack", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="per-state super-resolution volumes")
    p.add_argument("--stack", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--mode", choices=["direct", "convnet"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="metrics for a pipeline working dir")
    p.add_argument("--workdir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="run every stage into one working dir")
    p.add_argument("--workdir", required=True)
    p.add_argument("--keep-going", action="store_true")

    p = sub.add_parser(
        "study", help="peak-analysis vs classifier accuracy comparison")
    p.add_argument("--out", required=True)
    return parser


def _apply_thread_controls(args) -> None:
    n = 1 if args.deterministic else args.threads
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass  # thread caps are best-effort; numpy defaults remain


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        _apply_thread_controls(args)
        if args.command == "phantom":
            run_phantom(config, args.out)
        elif args.command == "pseudolabel":
            run_pseudolabel(config, args.stack, args.out)
        elif args.command == "train":
            run_train(config, args.stack, args.labels, args.out)
        elif args.command == "predict":
            checkpoint = Path(args.checkpoint)
            if not checkpoint.with_suffix(".json").exists():
                raise DataError(f"missing checkpoint: {checkpoint}")
            run_predict(config, args.stack, args.checkpoint, args.out)
        elif args.command == "reconstruct":
            if args.mode:
                config["recon"]["mode"] = args.mode
            run_reconstruct(config, args.stack, args.labels, args.out)
        elif args.command == "evaluate":
            run_evaluate(config, args.workdir, args.out)
        elif args.command == "pipeline":
            run_pipeline(config, args.workdir, keep_going=args.keep_going)
        elif args.command == "study":
            experiments.run_classification_study(
                experiments.StudyConfig(seed=config["seed"]), args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
