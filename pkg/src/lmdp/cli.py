"""Command-line front end: ``lmdp <subcommand> [--config PATH | --preset NAME]``.

Subcommands run the pipeline stages one at a time (``estimate-risk``,
``calibrate-sigma``, ``train``, ``evaluate-mia``), all of them in order
(``run``), or repeat the pipeline over a grid of one hyperparameter
(``ablate``). Every stage failure exits nonzero, names the stage and leaves a
``.partial`` marker next to whatever artifacts were already written.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from lmdp import io
from lmdp.accountant import compose_and_convert, AccountantState, calibrate_sigma
from lmdp.config import PRESETS, ExperimentConfig
from lmdp.errors import ConfigError, LMDPError
from lmdp.mia import AttackReport, attack_target
from lmdp.risk import RiskProfile, estimate_risk_profile
from lmdp.risk import max_workers
from lmdp.trainer import TrainResult, train

logger = logging.getLogger("lmdp")

PARTIAL_MARKER = ".partial"
ABLATE_PARAMS = ("epsilon", "C", "r")


class StageFailure(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (LMDPError, OSError, ValueError, FloatingPointError) as exc:
        raise StageFailure(name, exc) from exc


# ---------------------------------------------------------------- stages

def estimate_risk(cfg: ExperimentConfig, out: Path) -> RiskProfile:
    _, _, shadow_data = cfg.load_data()
    profile = estimate_risk_profile(cfg.build_model(shadow_data, "shadow-init"), shadow_data, cfg.shadow)
    io.write_json(out / "risk_profile.json", {"format_version": 1, **profile.to_json(),
                                              "layers": profile.metrics}, "risk_profile")
    io.write_csv(out / "adversary_metrics.csv", io.ADVERSARY_COLUMNS, profile.metrics)
    return profile


def load_risk_profile(path) -> RiskProfile:
    return RiskProfile.from_json(io.read_json(path, "risk_profile"))


def sigma_for(cfg: ExperimentConfig, out: Path | None, n: int | None = None) -> float:
    """Calibrate (or take the configured) noise multiplier and record it."""
    tc = cfg.train
    if not tc.private:
        return 0.0
    sigma = float(tc.sigma) if tc.sigma is not None else calibrate_sigma(tc.privacy_spec(n))
    if out is not None and sigma > 0:
        state = AccountantState().step(tc.q, sigma, max(tc.T, 1))
        eps, order = compose_and_convert(state, tc.delta)
        io.write_json(out / "sigma.json", {
            "format_version": 1, "sigma": sigma, "epsilon_target": tc.epsilon, "epsilon_accounted": eps,
            "order": order, "delta": tc.delta, "q": tc.q, "T": max(tc.T, 1)}, "sigma")
    return sigma


def run_training(cfg: ExperimentConfig, out: Path, profile: RiskProfile | None, sigma: float) -> TrainResult:
    train_data, test_data, _ = cfg.load_data()
    result = train(cfg.build_model(train_data), train_data, cfg.train, risks=profile, test=test_data, sigma=sigma)
    io.save_model(result.model, out / "model.lmdp")
    io.write_csv(out / "train_log.csv", io.TRAIN_LOG_COLUMNS,
                 [(g.t, g.batch_size, g.bias_norm, g.grad_norm, g.test_acc) for g in result.logs])
    return result


def evaluate_mia(cfg: ExperimentConfig, out: Path, model=None) -> AttackReport:
    train_data, test_data, _ = cfg.load_data()
    if model is None:
        model = io.load_model(out / "model.lmdp")
    report = attack_target(model, train_data, test_data, cfg.attack)
    io.write_json(out / "attack_report.json", {"format_version": 1, **report.to_json()}, "attack_report")
    io.write_csv(out / "attack_accuracy.csv", io.ATTACK_COLUMNS,
                 [(l + 1, a) for l, a in enumerate(report.per_layer_accuracy)])
    return report


def write_manifest(cfg: ExperimentConfig, out: Path, result: TrainResult) -> dict:
    tc = cfg.train
    artifacts = sorted(p.name for p in out.iterdir()
                       if p.is_file() and p.name not in ("manifest.json", PARTIAL_MARKER))
    final_acc = result.logs[-1].test_acc if result.logs else None
    doc = {
        "format_version": 1,
        "config": cfg.to_dict(),
        "method": tc.method,
        "sigma": result.sigma,
        "epsilon": result.epsilon,
        "epsilon_target": tc.epsilon if tc.private else None,
        "order": result.order,
        "delta": tc.delta,
        "steps_accounted": result.steps_accounted,
        "steps_with_data": result.steps_with_data,
        "final_test_acc": final_acc,
        "artifacts": artifacts,
        "metadata": {"created_at": datetime.now(timezone.utc).isoformat(timespec="seconds")},
    }
    return io.write_json(out / "manifest.json", doc, "manifest")


def run_pipeline(cfg: ExperimentConfig, out: Path, profile: RiskProfile | None = None) -> dict:
    """estimate-risk -> calibrate-sigma -> train -> evaluate-mia; returns a summary row."""
    out.mkdir(parents=True, exist_ok=True)
    if profile is None:
        profile = _stage("estimate-risk", estimate_risk, cfg, out)
    else:
        io.write_json(out / "risk_profile.json", {"format_version": 1, **profile.to_json(),
                                                  "layers": profile.metrics}, "risk_profile")
        io.write_csv(out / "adversary_metrics.csv", io.ADVERSARY_COLUMNS, profile.metrics)
    n = cfg.dataset["n_train"]
    sigma = _stage("calibrate-sigma", sigma_for, cfg, out, n)
    result = _stage("train", run_training, cfg, out, profile, sigma)
    report = _stage("evaluate-mia", evaluate_mia, cfg, out, result.model)
    _stage("manifest", write_manifest, cfg, out, result)
    return {"peak_accuracy": report.peak_accuracy, "peak_layer": report.peak_layer,
            "final_test_acc": result.logs[-1].test_acc if result.logs else None,
            "epsilon": result.epsilon, "sigma": result.sigma}


def _value_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def ablate(cfg: ExperimentConfig, out: Path, param: str, values: list[float]) -> dict:
    """One full pipeline run per value, each in ``out/<param>-<value>/``.

    The shadow stage does not depend on the swept parameter, so the risk
    profile is estimated once and copied into every run directory.
    """
    if param not in ABLATE_PARAMS:
        raise ConfigError(f"can only sweep {ABLATE_PARAMS}, got {param!r}")
    out.mkdir(parents=True, exist_ok=True)
    profile = _stage("estimate-risk", estimate_risk, cfg, out)
    runs = [(v, f"{param}-{_value_label(v)}") for v in values]

    def job(item):
        value, name = item
        sub = cfg.with_overrides("train", **{param: value})
        row = run_pipeline(sub, out / name, profile)
        return {"value": value, "dir": name, **row}

    workers = min(max_workers(), len(runs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(job, runs))
    else:
        rows = [job(r) for r in runs]
    doc = io.write_json(out / "ablation.json",
                        {"format_version": 1, "param": param, "values": list(values), "runs": rows}, "ablation")
    io.write_csv(out / "ablation.csv", io.ABLATION_COLUMNS, [{"param": param, **r} for r in rows])
    return doc


# ---------------------------------------------------------------- argument handling

def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty value list")
    return values


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="experiment config JSON")
    src.add_argument("--preset", choices=sorted(PRESETS), help="shipped preset")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lmdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("estimate-risk", parents=[common], help="per-layer risk profile from shadow data")
    cal = sub.add_parser("calibrate-sigma", parents=[common], help="noise multiplier for the budget")
    for flag, typ in (("--epsilon", float), ("--delta", float), ("--q", float), ("--T", int)):
        cal.add_argument(flag, type=typ, help="override the config value")
    tr = sub.add_parser("train", parents=[common], help="train the target model")
    tr.add_argument("--risk-profile", type=Path, help="risk_profile.json (default: OUT/risk_profile.json)")
    tr.add_argument("--sigma", type=float, help="noise multiplier (default: calibrate)")
    ev = sub.add_parser("evaluate-mia", parents=[common], help="per-layer attack on a trained model")
    ev.add_argument("--model", type=Path, help="model container (default: OUT/model.lmdp)")
    sub.add_parser("run", parents=[common], help="full pipeline")
    ab = sub.add_parser("ablate", parents=[common], help="pipeline sweep over one parameter")
    ab.add_argument("--param", required=True, choices=ABLATE_PARAMS)
    ab.add_argument("--values", required=True, type=_parse_values, help="comma separated, e.g. 1,2,3")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        return ExperimentConfig.load(args.config, seed=args.seed)
    return ExperimentConfig.from_preset(args.preset, seed=args.seed)


def _dispatch(args, cfg: ExperimentConfig, out: Path) -> None:
    cmd = args.command
    if cmd == "run":
        run_pipeline(cfg, out)
    elif cmd == "ablate":
        ablate(cfg, out, args.param, args.values)
    elif cmd == "estimate-risk":
        _stage(cmd, estimate_risk, cfg, out)
    elif cmd == "calibrate-sigma":
        over = {k: getattr(args, k) for k in ("epsilon", "delta", "q", "T") if getattr(args, k) is not None}
        if over:
            cfg = _stage(cmd, cfg.with_overrides, "train", **over)
        if not cfg.train.private:
            raise StageFailure(cmd, ConfigError(f"method {cfg.train.method!r} adds no noise"))
        sigma = _stage(cmd, sigma_for, cfg, out, cfg.dataset["n_train"])
        print(f"sigma = {sigma:.6g}")
    elif cmd == "train":
        path = args.risk_profile or out / "risk_profile.json"
        profile = _stage(cmd, load_risk_profile, path) if Path(path).exists() else None
        if profile is None and args.risk_profile is not None:
            raise StageFailure(cmd, ConfigError(f"risk profile {path} does not exist"))
        sigma = args.sigma if args.sigma is not None else _stage("calibrate-sigma", sigma_for, cfg, out,
                                                                  cfg.dataset["n_train"])
        result = _stage(cmd, run_training, cfg, out, profile, sigma)
        _stage("manifest", write_manifest, cfg, out, result)
    elif cmd == "evaluate-mia":
        model = _stage(cmd, io.load_model, args.model) if args.model is not None else None
        report = _stage(cmd, evaluate_mia, cfg, out, model)
        print(f"peak attack accuracy {report.peak_accuracy:.4f} at layer {report.peak_layer}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
    except LMDPError as exc:
        print(f"lmdp: stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.out or "lmdp-out")
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    try:
        _dispatch(args, cfg, out)
    except StageFailure as exc:
        marker.write_text(f"failed stage: {exc.stage}\nerror: {exc.cause}\n", encoding="utf-8")
        print(f"lmdp: {exc}", file=sys.stderr)
        return 1
    if marker.exists():
        marker.unlink()
    return 0


if __name__ == "__main__":
    sys.exit(main())
