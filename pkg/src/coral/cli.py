"""Command-line entry point: make-data, train, sample, eval.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from coral import rng as rngs
from coral.denoiser import ArchConfig, CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint
from coral.evaluation import evaluate
from coral.longtail_data import DatasetFormatError, class_counts, make_ring_gaussians, read_dataset, write_dataset
from coral.sampling import SampleConfig, sample_per_class
from coral.schedules import ContrastiveWeightConfig, make_linear_schedule
from coral.training import TrainConfig, load_train_state, save_train_state, train

log = logging.getLogger("coral")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "arch.hidden": 64,
    "arch.bottleneck": 16,
    "arch.proj_dim": 8,
    "arch.time_embed_dim": 32,
    "schedule.T": 100,
    "schedule.beta_min": 1e-4,
    "schedule.beta_max": 0.02,
    "train.steps": 5000,
    "train.batch_size": 128,
    "train.lr": 2e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.p_uncond": 0.1,
    "train.w": 0.01,
    "train.tau_r": 0.8,
    "train.tau_sc": 0.12,
    "train.seed": 0,
    "train.reduction": "mean",
    "train.lambda_mode": "batch_mean",
    "sample.omega": 0.6,
    "sample.n_per_class": 100,
    "sample.sigma_rule": "beta",
    "sample.seed": 0,
    "data.train": "",
    "output.dir": "run",
}


_RULES = {
    "arch.hidden": (lambda v: v >= 1, "must be >= 1"),
    "arch.bottleneck": (lambda v: v >= 1, "must be >= 1"),
    "arch.proj_dim": (lambda v: v >= 2, "must be >= 2"),
    "arch.time_embed_dim": (lambda v: v >= 1, "must be >= 1"),
    "schedule.T": (lambda v: v >= 1, "must be >= 1"),
    "schedule.beta_min": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "schedule.beta_max": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "train.steps": (lambda v: v >= 0, "must be >= 0"),
    "train.batch_size": (lambda v: v >= 2, "must be >= 2"),
    "train.lr": (lambda v: v > 0, "must be positive"),
    "train.beta1": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "train.beta2": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "train.adam_eps": (lambda v: v > 0, "must be positive"),
    "train.p_uncond": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "train.w": (lambda v: v >= 0, "must be >= 0"),
    "train.tau_r": (lambda v: v > 0, "must be positive"),
    "train.tau_sc": (lambda v: v > 0, "must be positive"),
    "train.reduction": (lambda v: v in ("mean", "sum"), "must be 'mean' or 'sum'"),
    "train.lambda_mode": (lambda v: v in ("batch_mean", "shared_t"), "must be 'batch_mean' or 'shared_t'"),
    "sample.omega": (lambda v: v >= 0, "must be >= 0"),
    "sample.n_per_class": (lambda v: v >= 0, "must be >= 0"),
    "sample.sigma_rule": (lambda v: v in ("beta", "posterior"), "must be 'beta' or 'posterior'"),
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        """Defaults, then the JSON file, then flag overrides. All problems are reported together."""
        values = dict(DEFAULTS)
        problems = []
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
            if not isinstance(raw, dict):
                raise ConfigError(["config file must hold a JSON object"])
            for key, val in raw.items():
                if key not in DEFAULTS:
                    problems.append(f"unknown key {key!r}")
                elif not _type_ok(DEFAULTS[key], val):
                    problems.append(f"{key}: expected {type(DEFAULTS[key]).__name__}, got {val!r}")
                else:
                    values[key] = val
        for key, val in (overrides or {}).items():
            if val is not None:
                values[key] = val
        if problems:
            raise ConfigError(problems)
        cfg = cls(values)
        problems += cfg._validate()
        if problems:
            raise ConfigError(problems)
        return cfg

    def _validate(self) -> list[str]:
        problems = [f"{key}: {msg} (got {self.values[key]!r})"
                    for key, (ok, msg) in _RULES.items() if not ok(self.values[key])]
        if problems:
            return problems
        builders = {
            "arch": lambda: ArchConfig(dim=1, num_classes=1, **self.arch_kwargs()),
            "train": self.train_config,
            "sample": self.sample_config,
            "schedule": self.schedule,
        }
        for name, build in builders.items():
            try:
                build()
            except (ValueError, TypeError) as exc:
                problems.append(f"{name}: {exc}")
        return problems

    def __getitem__(self, key):
        return self.values[key]

    def arch_kwargs(self) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("arch.")}

    def schedule_params(self) -> dict:
        return {"T": self["schedule.T"], "beta_min": self["schedule.beta_min"], "beta_max": self["schedule.beta_max"]}

    def schedule(self):
        return make_linear_schedule(**self.schedule_params())

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            steps=v["train.steps"], batch_size=v["train.batch_size"], lr=float(v["train.lr"]),
            beta1=float(v["train.beta1"]), beta2=float(v["train.beta2"]), adam_eps=float(v["train.adam_eps"]),
            p_uncond=float(v["train.p_uncond"]),
            contrastive=ContrastiveWeightConfig(float(v["train.w"]), float(v["train.tau_r"])),
            tau_sc=float(v["train.tau_sc"]), T=v["schedule.T"], beta_min=float(v["schedule.beta_min"]),
            beta_max=float(v["schedule.beta_max"]), seed=v["train.seed"], reduction=v["train.reduction"],
            lambda_mode=v["train.lambda_mode"],
        )

    def sample_config(self) -> SampleConfig:
        v = self.values
        return SampleConfig(omega=float(v["sample.omega"]), n_per_class=v["sample.n_per_class"],
                            sigma_rule=v["sample.sigma_rule"], seed=v["sample.seed"])


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def cmd_make_data(args) -> int:
    try:
        counts = class_counts(args.head_count, args.rho, args.classes)
        data = make_ring_gaussians(args.classes, counts, args.radius, args.sigma, args.dim,
                                   rngs.stream(args.seed, "make-data"))
    except ValueError as exc:
        log.error("invalid dataset parameters: %s", exc)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        write_dataset(data, out)
        sidecar = {"class_counts": counts, "total": int(sum(counts)), "seed": args.seed}
        Path(str(out) + ".counts.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    except OSError as exc:
        log.error("cannot write %s: %s", out, exc)
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"data.train": args.data, "output.dir": args.out_dir, "train.steps": args.steps,
                 "train.seed": args.seed}
    if args.baseline:
        overrides["train.w"] = 0.0
    cfg = RunConfig.load(args.config, overrides)
    data_path = cfg["data.train"]
    if not data_path or not Path(data_path).is_file():
        log.error("training dataset not found: %r", data_path)
        return EXIT_DATA
    data = read_dataset(data_path)
    arch = ArchConfig(dim=data.dim, num_classes=data.num_classes, **cfg.arch_kwargs())
    tcfg = cfg.train_config()
    out_dir = Path(cfg["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, state_path, log_path = out_dir / "model.ckpt", out_dir / "train_state.npz", out_dir / "train_log.csv"

    model = state = None
    if args.resume:
        if not state_path.is_file():
            log.error("nothing to resume: %s missing", state_path)
            return EXIT_DATA
        model, state = load_train_state(state_path, arch)
        log.info("resuming at step %d", state.step)

    def report(rec):
        if rec.step % 500 == 0:
            log.info("step %d l_diff %.4f l_con %.4f lambda %.4g", rec.step, rec.l_diff, rec.l_con, rec.lambda_bar)

    model, train_log, state = train(tcfg, data, arch, model=model, state=state, progress=report)
    schedule_params = cfg.schedule_params()
    _atomic_write(ckpt, lambda p: save_checkpoint(model, p, schedule_params))
    _atomic_write(state_path, lambda p: save_train_state(model, state, p))
    if args.resume and log_path.is_file():
        tmp = out_dir / "train_log.part.csv"
        train_log.write_csv(tmp)
        rows = tmp.read_text().splitlines(keepends=True)[1:]
        with open(log_path, "a") as fh:
            fh.writelines(rows)
        tmp.unlink()
    else:
        _atomic_write(log_path, train_log.write_csv)
    return EXIT_OK


def _schedule_from_checkpoint(sched: dict):
    return make_linear_schedule(**sched) if sched else make_linear_schedule()


def cmd_sample(args) -> int:
    model, sched = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = RunConfig.load(args.config)
        expected = cfg.arch_kwargs()
        actual = {k: getattr(model.arch, k) for k in expected}
        if expected != actual:
            raise CheckpointError(f"checkpoint architecture {actual} does not match config {expected}")
    scfg = SampleConfig(omega=args.omega, n_per_class=args.per_class, sigma_rule=args.sigma_rule, seed=args.seed)
    gen = sample_per_class(model, _schedule_from_checkpoint(sched), scfg)
    _atomic_write(Path(args.out), lambda p: write_dataset(gen, p))
    return EXIT_OK


def cmd_eval(args) -> int:
    real = read_dataset(args.real)
    gen = read_dataset(args.gen)
    if real.dim != gen.dim:
        log.error("dimension mismatch: real %d vs generated %d", real.dim, gen.dim)
        return EXIT_DATA
    clusters = args.clusters if args.clusters is not None else 20 * real.num_classes
    if clusters > real.n_total + gen.n_total:
        log.error("--clusters %d exceeds combined sample count %d", clusters, real.n_total + gen.n_total)
        return EXIT_CONFIG
    model = schedule = None
    if args.checkpoint:
        model, sched = load_checkpoint(args.checkpoint)
        schedule = _schedule_from_checkpoint(sched)
    latent_t = args.latent_t
    if latent_t is None and schedule is not None:
        latent_t = int(math.floor(0.05 * schedule.T))
    report, latents = evaluate(real, gen, model, schedule, knn_k=args.knn_k, num_clusters=clusters,
                               latent_k=args.latent_k, latent_t=latent_t, seed=args.seed,
                               latent_condition=args.latent_condition)
    Path(args.out).write_text(report.to_json() + "\n")
    if latents is not None and args.latents_out:
        latents.write_csv(args.latents_out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="coral", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a long-tailed ring-of-Gaussians LTDS1 dataset", formatter_class=fmt)
    p.add_argument("--classes", type=int, default=10, help="number of classes C")
    p.add_argument("--head-count", type=int, default=5000, help="head-class sample count N")
    p.add_argument("--rho", type=float, default=0.01, help="imbalance ratio in (0, 1]")
    p.add_argument("--radius", type=float, default=3.0, help="ring radius of the class centers")
    p.add_argument("--sigma", type=float, default=0.5, help="per-class isotropic standard deviation")
    p.add_argument("--dim", type=int, default=2, help="sample dimensionality (>= 2)")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--out", required=True, help="output LTDS1 path")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a denoiser with the CORAL objective", formatter_class=fmt)
    p.add_argument("--config", default=None, help="JSON run config with flat dotted keys")
    p.add_argument("--data", default=None, help="training LTDS1 file (overrides data.train)")
    p.add_argument("--out-dir", default=None, help="output directory (overrides output.dir)")
    p.add_argument("--steps", type=int, default=None, help="total optimizer steps (overrides train.steps)")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides train.seed)")
    p.add_argument("--baseline", action="store_true", help="force w=0, i.e. plain conditional DDPM")
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/train_state.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw class-conditional samples with classifier-free guidance",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--config", default=None, help="optional run config checked against the checkpoint")
    p.add_argument("--omega", type=float, default=0.6, help="guidance weight")
    p.add_argument("--per-class", type=int, default=100, help="samples per class")
    p.add_argument("--sigma-rule", choices=("beta", "posterior"), default="beta", help="reverse-step variance")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--out", required=True, help="output LTDS1 path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute the evaluation report", formatter_class=fmt)
    p.add_argument("--real", required=True, help="real LTDS1 file")
    p.add_argument("--gen", required=True, help="generated LTDS1 file")
    p.add_argument("--checkpoint", default=None, help="checkpoint for latent diagnostics")
    p.add_argument("--knn-k", type=int, default=3, help="k for improved precision/recall")
    p.add_argument("--clusters", type=int, default=None, help="PRD k-means clusters (default 20 x classes)")
    p.add_argument("--latent-k", type=int, default=10, help="k for latent kNN purity")
    p.add_argument("--latent-t", type=int, default=None, help="noise level for latents (default floor(0.05 T))")
    p.add_argument("--latent-condition", choices=("label", "null"), default="label",
                   help="label fed to the denoiser when extracting latents")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--out", default="report.json", help="EvalReport JSON path")
    p.add_argument("--latents-out", default="latents.csv", help="latent feature CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            log.error("config: %s", problem)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NonFiniteError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
