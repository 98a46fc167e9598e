"""``radflip`` command line.

Every subcommand reads a run manifest (a JSON file naming the DRAM, error
model, model and dataset configs plus seeds) and writes plain CSV/JSON under
the output directory.  Exit codes: 0 success, 2 configuration error,
3 planning or campaign error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .addrspace import PinnedPayloadFrames, ProcPagemapProvider, TranslationError
from .dram import AddressScheme, DramConfig, DramError, load_dram_standard, make_scheme, scheme_from_dict
from .injector import PlanningError, apply_flips
from .kernels import BACKEND
from .radiation import ErrorModelConfig, ModelError, load_error_model
from .scanner import (CRASH_DROP, ROUND_COLUMNS, CampaignConfig, CampaignError, is_crash, map_range,
                      plan_round, run_campaign, select_sensitive_area, sensitive_share,
                      sensitivity_scan, layer_thirds)
from .tinynn.data import Dataset, build_toy_splits, load_dataset, save_dataset
from .tinynn.engine import EngineFormatError, EngineImage, deserialize, serialize
from .tinynn.spec import ExitPolicy, ModelSpec, SpecError, load_model_spec

log = logging.getLogger("radflip")

EXIT_OK, EXIT_CONFIG, EXIT_CAMPAIGN, EXIT_TRAINING = 0, 2, 3, 4
ENGINE_SUFFIX = ".rfe"
REPORT_COLUMNS = ["variant", "area", "total_bits", "rounds", "baseline", "crash_pct",
                  "mean", "min", "max", "mean_depth"]
_SUMMARY_KEYS = {"variant", "area", "total_bits", "rounds", "baseline", "mean", "min", "max",
                 "crash_rate", "mean_depth", "config"}


class ConfigError(ValueError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class RunManifest:
    """Parsed run manifest; every referenced file exists and parses."""

    path: Path
    dram_standard: Path
    dram_mapping: Path
    error_model_path: Path
    model_path: Path
    dataset_path: Path
    out: Path
    seeds: dict[str, int]
    training: dict = field(default_factory=dict)
    eval_split: str = "test"
    calibration_split: str = "train"
    device: DramConfig | None = None
    scheme: AddressScheme | None = None
    error_model: ErrorModelConfig | None = None
    model: ModelSpec | None = None
    dataset_manifest: dict | None = None

    FILE_KEYS = ("dram_standard", "dram_mapping", "error_model", "model", "dataset")
    SEED_KEYS = ("data", "train", "campaign")

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None, out: str | Path | None = None,
             scheme: str | None = None) -> "RunManifest":
        path = Path(path)
        raw = _read_json(path)
        missing = [k for k in cls.FILE_KEYS if k not in raw]
        if missing:
            raise ConfigError(f"{path}: missing keys {missing}")
        unknown = set(raw) - set(cls.FILE_KEYS) - {"seeds", "out", "training", "eval_split",
                                                   "calibration_split"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        files = {}
        for key in cls.FILE_KEYS:
            p = Path(raw[key])
            p = p if p.is_absolute() else path.parent / p
            if p.is_dir():
                p = p / "manifest.json"
            if not p.is_file():
                raise ConfigError(f"{path}: {key} file {p} does not exist")
            files[key] = p
        seeds = {k: 0 for k in cls.SEED_KEYS}
        seeds.update({k: int(v) for k, v in raw.get("seeds", {}).items()})
        if set(seeds) - set(cls.SEED_KEYS):
            raise ConfigError(f"{path}: unknown seed names {sorted(set(seeds) - set(cls.SEED_KEYS))}")
        if seed is not None:
            seeds = {k: seed for k in seeds}
        out_dir = Path(out) if out is not None else Path(raw.get("out", "runs"))
        if not out_dir.is_absolute() and out is None:
            out_dir = path.parent / out_dir
        m = cls(path, files["dram_standard"], files["dram_mapping"], files["error_model"],
                files["model"], files["dataset"], out_dir, seeds, raw.get("training", {}),
                raw.get("eval_split", "test"), raw.get("calibration_split", "train"))
        m._parse(scheme)
        return m

    def _parse(self, scheme_override: str | None) -> None:
        try:
            self.device = load_dram_standard(self.dram_standard)
            mapping = _read_json(self.dram_mapping)
            if scheme_override:
                self.scheme = make_scheme(self.device, scheme_override)
            else:
                self.scheme = scheme_from_dict(mapping, self.device)
            self.error_model = load_error_model(self.error_model_path)
            self.model = load_model_spec(self.model_path)
            self.dataset_manifest = _read_json(self.dataset_path)
            for split in (self.eval_split, self.calibration_split):
                if split not in self.dataset_manifest.get("splits", {}):
                    raise ConfigError(f"{self.dataset_path}: no split named {split!r}")
            self.train_configs()
        except (DramError, ModelError, SpecError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{self.path}: {exc}") from None

    def train_configs(self):
        from .tinynn.train import TrainConfig

        t = dict(self.training)
        unknown = set(t) - {"backbone", "exits", "calibration_size", "exit_threshold"}
        if unknown:
            raise ConfigError(f"unknown training keys {sorted(unknown)}")
        seed = self.seeds["train"]
        backbone = TrainConfig(**{**t.get("backbone", {}), "seed": seed})
        exits = TrainConfig(**{"epochs": 30, **t.get("exits", {}), "seed": seed})
        return backbone, exits, int(t.get("calibration_size", 1000)), float(t.get("exit_threshold", 0.9))

    @property
    def exit_threshold(self) -> float:
        return self.train_configs()[3]

    def splits(self) -> dict[str, Dataset]:
        return load_dataset(self.dataset_path)

    def provenance(self) -> dict:
        return {"manifest": str(self.path), "seeds": self.seeds,
                "files": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in
                          zip(self.FILE_KEYS, (self.dram_standard, self.dram_mapping,
                                               self.error_model_path, self.model_path,
                                               self.dataset_path))},
                "version": __version__, "kernels": BACKEND}


# ---------------------------------------------------------------- helpers

def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")


def _load_engine(path: str | Path) -> EngineImage:
    try:
        image = EngineImage.load(path)
        deserialize(image.data)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such engine image") from None
    except EngineFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return image


def _policy(image: EngineImage, threshold: float | None) -> ExitPolicy:
    if threshold is None or not deserialize(image.data).has_exits:
        return ExitPolicy(enabled=False)
    return ExitPolicy(threshold)


def _parse_range(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        a, b = (int(v, 0) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"byte range {text!r} is not START:END") from None
    if not 0 <= a < b:
        raise ConfigError(f"byte range {text!r} is empty")
    return a, b


def _eval_set(m: RunManifest, subset: int | None) -> Dataset:
    ds = m.splits()[m.eval_split]
    if subset:
        ds = ds.stratified(subset, m.seeds["data"])
    return ds


# ---------------------------------------------------------------- subcommands

def cmd_dataset(args) -> int:
    seed = 0 if args.seed is None else args.seed
    sizes = tuple(int(s) for s in args.sizes.split(","))
    if len(sizes) != 3:
        raise ConfigError("--sizes takes train,val,test")
    path = save_dataset(build_toy_splits(args.task, seed, sizes), args.out or "data", seed)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .tinynn.pipeline import build_variants

    m = _manifest(args)
    backbone, exits, calib, threshold = m.train_configs()
    splits = m.splits()
    b = build_variants(m.model, splits["train"], splits[m.eval_split], backbone, exits, calib, threshold)
    out = m.out / "engines"
    out.mkdir(parents=True, exist_ok=True)
    record = {"provenance": m.provenance(), "training": {"backbone": backbone.to_dict(),
              "exits": exits.to_dict(), "calibration_size": calib, "exit_threshold": threshold},
              "thetas": {k: {str(i): t for i, t in v.items()} for k, v in b.thetas.items()},
              "report": b.report, "images": {}}
    for name, image in b.images.items():
        p = out / f"{name}{ENGINE_SUFFIX}"
        image.save(p)
        record["images"][name] = {"path": str(p), "bytes": len(image), "sha256": image.sha256()}
        log.info("wrote %s (%d bytes)", p, len(image))
    _write_json(out / "provenance.json", record)
    print(json.dumps({k: v for k, v in b.report.items() if k != "history"}, indent=2, default=float))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .tinynn.quant import calibrate_engine, set_engine_thetas

    m = _manifest(args)
    image = _load_engine(args.engine)
    _, _, size, _ = m.train_configs()
    calib = m.splits()[m.calibration_split].x[:args.size or size]
    model = deserialize(image.data)
    thetas = calibrate_engine(model, calib)
    act = None if args.activation == "keep" else args.activation
    new = serialize(set_engine_thetas(model, thetas, act))
    stem = Path(args.engine).stem
    out = m.out / "engines" / f"{stem}-{args.activation}{ENGINE_SUFFIX}"
    out.parent.mkdir(parents=True, exist_ok=True)
    new.save(out)
    _write_json(out.with_suffix(".thetas.json"),
                {"source": str(args.engine), "activation": args.activation, "calibration_size": len(calib),
                 "thetas": {str(i): t for i, t in sorted(thetas.items())}, "sha256": new.sha256()})
    print(out)
    return EXIT_OK


def cmd_scan(args) -> int:
    m = _manifest(args)
    image = _load_engine(args.engine)
    ds = m.splits()[m.eval_split]
    policy = _policy(image, None if args.no_exits else m.exit_threshold)
    digest = image.sha256()
    smap = sensitivity_scan(image, ds, policy, region=_parse_range(args.region),
                            eval_size=args.eval_size, seed=m.seeds["data"])
    if image.sha256() != digest:
        raise CampaignError("scan left the engine image modified")
    stem = Path(args.engine).stem
    out = m.out / "scan"
    out.mkdir(parents=True, exist_ok=True)
    rows = smap.write_csv(out / f"{stem}_bits.csv")
    pages, cells = smap.write_page_grid(out / f"{stem}_pages.csv", args.cell_bytes)
    n_layers = len(deserialize(image.data).backbone)
    shallow, deep = layer_thirds(n_layers)
    summary = {"engine": str(Path(args.engine).resolve()), "sha256": digest, "baseline": smap.baseline,
               "eval_size": smap.eval_size, "scanned_bits": rows, "grid": [pages, cells],
               "cell_bytes": args.cell_bytes, "threshold_points": CRASH_DROP,
               "sensitive_bits": int(smap.sensitive().sum()),
               "layers": {str(k): {"sensitive": s, "scanned": n} for k, (s, n) in smap.layer_counts().items()},
               "shallow_share": sensitive_share(smap, shallow), "deep_share": sensitive_share(smap, deep)}
    if not args.region:
        summary["sensitive_area"] = list(select_sensitive_area(smap, image, args.area_bytes))
    _write_json(out / f"{stem}_summary.json", summary)
    print(out / f"{stem}_summary.json")
    return EXIT_OK


def _campaign_provider(args, image: EngineImage, cfg: CampaignConfig):
    if not args.os_pagemap:
        return None
    if not ProcPagemapProvider.available():
        raise TranslationError("--os-pagemap needs a readable /proc/self/pagemap")
    return PinnedPayloadFrames(bytes(image.data), cfg.page_size)


def cmd_inject(args) -> int:
    m = _manifest(args)
    image = _load_engine(args.engine)
    cfg = CampaignConfig(total_bits=args.bits, rounds=1, area="sensitive" if args.target else "global",
                         sensitive_range=_parse_range(args.target), seed=m.seeds["campaign"],
                         scheme_id=m.scheme.scheme_id, device="toy")
    provider = _campaign_provider(args, image, cfg)
    block_map, plan = plan_round(image, cfg, args.round, m.error_model, m.device, m.scheme, provider)
    doc = {"engine": str(args.engine), "block_map": block_map.to_dict(), "plan": plan.to_dict()}
    out = m.out / "inject" / f"{Path(args.engine).stem}_r{args.round}_{args.bits}b.json"
    _write_json(out, doc)
    if args.apply:
        flipped = image.copy()
        apply_flips(flipped.buffer, plan)
        flipped.save(args.apply)
    print(out)
    return EXIT_OK


def cmd_campaign(args) -> int:
    m = _manifest(args)
    image = _load_engine(args.engine)
    raw = _read_json(Path(args.config))
    raw.setdefault("seed", m.seeds["campaign"])
    if args.seed is not None:
        raw["seed"] = args.seed
    raw["scheme_id"] = m.scheme.scheme_id
    area_from = raw.pop("area_from", None) or args.area_from
    if raw.get("area") == "sensitive" and raw.get("sensitive_range") is None:
        if area_from is None:
            raise ConfigError("a sensitive campaign needs sensitive_range or --area-from")
        path = Path(area_from)
        if not path.is_absolute() and not path.exists():
            path = Path(args.config).parent / path
        scan = _read_json(path)
        src = _load_engine(scan["engine"])
        try:
            raw["sensitive_range"] = list(map_range(src, image, tuple(scan["sensitive_area"])))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"cannot place the sensitive area in {args.engine}: {exc}") from None
    try:
        cfg = CampaignConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    ds = _eval_set(m, args.subset)
    policy = _policy(image, None if args.no_exits else m.exit_threshold)
    variant = args.variant or Path(args.engine).stem
    provider = _campaign_provider(args, image, cfg)
    res = run_campaign(image, ds, cfg, m.error_model, policy, m.device, variant, m.scheme, provider)
    out = m.out / "campaigns" / f"{variant}_{cfg.area}_{cfg.total_bits}"
    res.write(out)
    log.info("%s: crash rate %.3f over %d rounds", variant, res.summary()["crash_rate"], cfg.rounds)
    print(out)
    return EXIT_OK


def _result_dirs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "summary.json").is_file():
            found.append(p)
        else:
            found.extend(sorted(s.parent for s in p.rglob("summary.json")))
    if not found:
        raise ConfigError("no campaign results (summary.json) under the given directories")
    return found


def aggregate(result_dir: str | Path) -> dict:
    """One report row, recomputed from ``rounds.csv``."""
    d = Path(result_dir)
    summary = _read_json(d / "summary.json")
    if set(summary) != _SUMMARY_KEYS:
        raise ConfigError(f"{d}: summary schema differs from this release")
    with open(d / "rounds.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ROUND_COLUMNS:
            raise ConfigError(f"{d}: rounds.csv columns {header} != {ROUND_COLUMNS}")
        rows = list(reader)
    perf = np.array([float(r[1]) for r in rows])
    depth = np.array([float(r[4]) for r in rows])
    base = float(summary["baseline"])
    n = len(rows)
    crashes = sum(is_crash(base, p) for p in perf)
    return {"variant": summary["variant"], "area": summary["area"], "total_bits": summary["total_bits"],
            "rounds": n, "baseline": base,
            "crash_pct": 100.0 * crashes / n if n else math.nan,
            "mean": float(perf.mean()) if n else math.nan,
            "min": float(perf.min()) if n else math.nan,
            "max": float(perf.max()) if n else math.nan,
            "mean_depth": float(np.nanmean(depth)) if n else math.nan}


def cmd_report(args) -> int:
    rows = [aggregate(d) for d in _result_dirs(args.dirs)]
    rows.sort(key=lambda r: (r["area"], r["total_bits"], r["variant"]))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    _write_json(out / "report.json", {"columns": REPORT_COLUMNS, "rows": rows})
    for r in rows:
        print(f"{r['area']:>9} {r['total_bits']:>5} {r['variant']:>10}  crash {r['crash_pct']:6.2f}%"
              f"  mean {r['mean']:6.2f}  min {r['min']:6.2f}  max {r['max']:6.2f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _manifest(args) -> RunManifest:
    return RunManifest.load(args.manifest, args.seed, args.out, args.scheme)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override every seed in the manifest")
    common.add_argument("--out", help="output directory (default: the manifest's 'out')")
    common.add_argument("--scheme", type=str.upper, choices=("S1", "S2", "S3"),
                        help="use a documented addressing scheme instead of the manifest's mapping")
    common.add_argument("--os-pagemap", action="store_true",
                        help="translate through /proc/self/pagemap (needs CAP_SYS_ADMIN)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="radflip", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"radflip {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("dataset", parents=[common], help="generate a toy dataset and its manifest")
    s.add_argument("--task", choices=("classification", "detection"), default="classification")
    s.add_argument("--sizes", default="6000,1000,1000", help="train,val,test sample counts")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", parents=[common], help="train and export the clean/clip/rednet images")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", parents=[common], help="recalibrate clip bounds of an engine image")
    s.add_argument("manifest")
    s.add_argument("engine")
    s.add_argument("--activation", choices=("keep", "clip", "logclip"), default="keep",
                   help="turn ReLU layers into this bounded activation")
    s.add_argument("--size", type=int, help="calibration samples (default: manifest)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("scan", parents=[common], help="single-bit sensitivity scan")
    s.add_argument("manifest")
    s.add_argument("engine")
    s.add_argument("--region", help="byte range START:END (default: whole image)")
    s.add_argument("--eval-size", type=int, default=64, help="stratified samples scored per flip")
    s.add_argument("--cell-bytes", type=int, default=64)
    s.add_argument("--area-bytes", type=int, default=4096, help="size of the reported sensitive area")
    s.add_argument("--no-exits", action="store_true")
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("inject", parents=[common], help="plan one injection and emit it as JSON")
    s.add_argument("manifest")
    s.add_argument("engine")
    s.add_argument("--bits", type=int, required=True)
    s.add_argument("--target", help="byte range START:END inside the image (default: parameters)")
    s.add_argument("--round", type=int, default=0)
    s.add_argument("--apply", metavar="PATH", help="also write the flipped image here")
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("campaign", parents=[common], help="multi-round injection campaign")
    s.add_argument("manifest")
    s.add_argument("engine")
    s.add_argument("config", help="campaign JSON")
    s.add_argument("--variant", help="label for the results (default: engine file stem)")
    s.add_argument("--area-from", help="scan summary whose sensitive area to target")
    s.add_argument("--subset", type=int)
    s.add_argument("--no-exits", action="store_true")
    s.set_defaults(func=cmd_campaign)

    s = sub.add_parser("report", parents=[common], help="compare campaign results")
    s.add_argument("dirs", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .tinynn.train import TrainingError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"radflip: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlanningError, CampaignError, TranslationError) as exc:
        print(f"radflip: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CAMPAIGN
    except TrainingError as exc:
        print(f"radflip: training diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
