"""Config-driven experiment runner.

Subcommands: gen, split, prep, train, eval, compare, gradcheck.  All read a
flat `key = value` config file (`#` comments; only `strategy` may repeat)
and write their outputs plus a manifest into the output directory.  Outputs
contain no timestamps, so identical config + seed gives identical bytes.

Exit codes: 0 success, 1 validation error (bad config/input files),
2 runtime failure.  Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .data import (
    DataError,
    Dataset,
    GeneratorConfig,
    generate_synthetic,
    load_csv,
    scaled_leaf_counts,
    stratified_split,
    write_csv,
)
from .metrics import evaluate, format_comparison_tables, roc_points
from .nnet import LrSchedule, grad_check, perturb_parameters
from .rng import SplitMix64
from .strategies import (
    ALL_KINDS,
    CheckpointError,
    StrategyKind,
    TrainConfig,
    build_model,
    load_model,
    save_model,
    train,
    write_predictions,
)
from .taxonomy import Taxonomy, TaxonomyError, leaves, parse_taxonomy, path_to_root
from .volprep import (
    VolumeError,
    augment,
    crop_centered,
    featurize_pool,
    load_centroids,
    normalize_hu,
    read_volume,
    resample_trilinear,
)


class ConfigError(ValueError):
    pass


_REPEATABLE = {"strategy"}

_DEFAULTS = {
    "seed": "0",
    "out": "out",
    "feature_dim": "32",
    "count_scale": "1.0",
    "level_scales": "2.0, 1.0, 0.5",
    "noise_sigma": "1.0",
    "split_k": "5",
    "widths": "64, 32, 32",
    "hidden": "32",
    "dense_connectivity": "true",
    "epochs": "200",
    "batch": "16",
    "lr": "0.01",
    "lr_factor": "0.3333333333333333",
    "lr_period": "20",
    "auc_population": "all",
    "renormalize_leaky": "false",
    "hu_lo": "-1024",
    "hu_hi": "400",
    "crop_size": "48",
    "pool_block": "8",
    "augment_copies": "0",
    "gradcheck_tol": "1e-4",
    "gradcheck_batch": "8",
}

_KNOWN_KEYS = set(_DEFAULTS) | {
    "taxonomy", "csv", "synthetic", "counts", "volumes", "centroids",
    "strategy", "checkpoint",
}


class Config:
    """Flat key = value config with defaults and typed accessors."""

    def __init__(self, values: dict[str, str], strategies: list[str], base_dir: Path):
        self.values = values
        self.strategies = strategies
        self.base_dir = base_dir

    @classmethod
    def parse(cls, text: str, base_dir: Path) -> "Config":
        values: dict[str, str] = {}
        strategies: list[str] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            if key in _REPEATABLE:
                strategies.append(value)
            elif key in values:
                raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
            else:
                values[key] = value
        return cls(values, strategies, base_dir)

    def get(self, key: str) -> str | None:
        if key in self.values:
            return self.values[key]
        return _DEFAULTS.get(key)

    def require(self, key: str) -> str:
        v = self.get(key)
        if v is None:
            raise ConfigError(f"config key {key!r} is required")
        return v

    def get_int(self, key: str) -> int:
        try:
            return int(self.require(key))
        except ValueError:
            raise ConfigError(f"config key {key!r}: not an integer") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.require(key))
        except ValueError:
            raise ConfigError(f"config key {key!r}: not a number") from None

    def get_bool(self, key: str) -> bool:
        v = self.require(key).lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected true/false")

    def get_floats(self, key: str) -> tuple[float, ...]:
        try:
            return tuple(float(p) for p in self.require(key).split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"config key {key!r}: bad number list") from None

    def get_ints(self, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(p) for p in self.require(key).split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"config key {key!r}: bad integer list") from None

    def get_path(self, key: str) -> Path:
        raw = self.require(key)
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def resolved(self) -> dict[str, str]:
        """All keys with defaults materialized (for the manifest)."""
        out = dict(_DEFAULTS)
        out.update(self.values)
        return out


def _load_taxonomy(cfg: Config) -> Taxonomy:
    path = cfg.get_path("taxonomy")
    if not path.exists():
        raise ConfigError(f"taxonomy file not found: {path}")
    return parse_taxonomy(path.read_text())


def _dataset_source(cfg: Config) -> str:
    sources = [
        name
        for name, present in (
            ("csv", "csv" in cfg.values),
            ("synthetic", cfg.values.get("synthetic", "false").lower() in ("true", "1", "yes")),
            ("volumes", "volumes" in cfg.values),
        )
        if present
    ]
    if len(sources) != 1:
        raise ConfigError(
            "exactly one dataset source required (csv = PATH, synthetic = true, "
            "or volumes = DIR with centroids = PATH); got: " + (", ".join(sources) or "none")
        )
    return sources[0]


def _generator_config(cfg: Config, t: Taxonomy, seed: int) -> GeneratorConfig:
    if "counts" in cfg.values:
        counts = {}
        for part in cfg.values["counts"].split(","):
            if not part.strip():
                continue
            tag, _, num = part.partition(":")
            try:
                counts[tag.strip()] = int(num)
            except ValueError:
                raise ConfigError(f"bad counts entry {part!r}") from None
    else:
        counts = scaled_leaf_counts(t, cfg.get_float("count_scale"))
    return GeneratorConfig(
        feature_dim=cfg.get_int("feature_dim"),
        leaf_counts=counts,
        level_scales=cfg.get_floats("level_scales"),
        noise_sigma=cfg.get_float("noise_sigma"),
        seed=seed,
    )


def _resolve_dataset(cfg: Config, t: Taxonomy, seed: int, need_splits: bool) -> Dataset:
    source = _dataset_source(cfg)
    if source == "csv":
        path = cfg.get_path("csv")
        if not path.exists():
            raise ConfigError(f"dataset file not found: {path}")
        d = load_csv(path.read_text(), t)
    elif source == "synthetic":
        d = generate_synthetic(t, _generator_config(cfg, t, seed))
        d = stratified_split(d, k=cfg.get_int("split_k"), seed=seed)
    else:
        raise ConfigError(
            "volume sources must be preprocessed first: run `hiertax prep` and "
            "point `csv =` at its output"
        )
    if need_splits and all(s.split < 0 for s in d.samples):
        raise ConfigError("dataset has no split assignments; run `hiertax split` first")
    return d


def _train_config(cfg: Config, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.get_int("epochs"),
        batch_size=cfg.get_int("batch"),
        lr=LrSchedule(
            initial=cfg.get_float("lr"),
            factor=cfg.get_float("lr_factor"),
            period=cfg.get_int("lr_period"),
        ),
        seed=seed,
    )


def _strategy_kinds(cfg: Config, default_all: bool = False) -> list[StrategyKind]:
    if not cfg.strategies:
        if default_all:
            return list(ALL_KINDS)
        raise ConfigError("at least one `strategy = ...` line is required")
    return [StrategyKind.parse(s) for s in cfg.strategies]


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)
    print(f"wrote {path}", file=sys.stderr)


def _manifest(cfg: Config, command: str, seed: int, out_dir: Path,
              extra: dict[str, str] | None = None) -> None:
    lines = ["# hiertax run manifest", f"command = {command}",
             f"package_version = {__version__}", f"backend = {_kernels.BACKEND}",
             f"seed = {seed}"]
    resolved = cfg.resolved()
    resolved.pop("seed", None)
    for key in sorted(resolved):
        lines.append(f"{key} = {resolved[key]}")
    for s in cfg.strategies:
        lines.append(f"strategy = {s}")
    if extra:
        for key in sorted(extra):
            lines.append(f"{key} = {extra[key]}")
    lines.append(
        "rng_substreams = prototypes, noise, split, init/<strategy>, "
        "shuffle/<strategy>, augment/<id>/<copy>"
    )
    _write(out_dir / "manifest.txt", "\n".join(lines) + "\n")


# ---- commands -----------------------------------------------------------


def cmd_gen(cfg: Config, seed: int, out_dir: Path, args) -> int:
    t = _load_taxonomy(cfg)
    if _dataset_source(cfg) != "synthetic":
        raise ConfigError("gen requires `synthetic = true`")
    d = generate_synthetic(t, _generator_config(cfg, t, seed))
    _write(out_dir / "dataset.csv", write_csv(d))
    _manifest(cfg, "gen", seed, out_dir)
    return 0


def cmd_split(cfg: Config, seed: int, out_dir: Path, args) -> int:
    t = _load_taxonomy(cfg)
    if _dataset_source(cfg) != "csv":
        raise ConfigError("split requires `csv = PATH`")
    d = load_csv(cfg.get_path("csv").read_text(), t)
    d = stratified_split(d, k=cfg.get_int("split_k"), seed=seed)
    _write(out_dir / "dataset.csv", write_csv(d))
    _manifest(cfg, "split", seed, out_dir)
    return 0


def cmd_prep(cfg: Config, seed: int, out_dir: Path, args) -> int:
    if _dataset_source(cfg) != "volumes":
        raise ConfigError("prep requires `volumes = DIR` and `centroids = PATH`")
    vol_dir = cfg.get_path("volumes")
    cent_path = cfg.get_path("centroids")
    if not vol_dir.is_dir():
        raise ConfigError(f"volume directory not found: {vol_dir}")
    if not cent_path.exists():
        raise ConfigError(f"centroid file not found: {cent_path}")
    centroids = load_centroids(cent_path.read_text())
    window = (cfg.get_float("hu_lo"), cfg.get_float("hu_hi"))
    size = cfg.get_int("crop_size")
    block = cfg.get_int("pool_block")
    copies = cfg.get_int("augment_copies")
    root_stream = SplitMix64(seed)

    vol_files = sorted(vol_dir.glob("*.vol"))
    if not vol_files:
        raise ConfigError(f"no .vol files in {vol_dir}")
    errors = []
    rows = []
    dim = (size // block) ** 3
    for path in vol_files:
        vid = path.stem
        entry = centroids.get(vid)
        if entry is None:
            errors.append(f"{path.name}: no centroid for id {vid!r}")
            continue
        centroid, leaf = entry
        try:
            v = read_volume(path.read_bytes())
            v = resample_trilinear(v)
            v = normalize_hu(v, window)
            cropped = crop_centered(v, centroid, size)
            variants = [("", cropped)]
            for k in range(copies):
                aug_seed = root_stream.substream(f"augment/{vid}/{k}").seed
                variants.append((f"_aug{k}", augment(cropped, aug_seed)))
            for suffix, vol in variants:
                feats = featurize_pool(vol, block)
                rows.append((vid + suffix, leaf or "", feats))
        except (VolumeError, OSError) as e:
            errors.append(f"{path.name}: {e}")
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    header = ["id", "leaf", "split"] + [f"f{i}" for i in range(dim)]
    lines = [",".join(header)]
    for vid, leaf, feats in rows:
        lines.append(f"{vid},{leaf},-1," + ",".join("%.17g" % v for v in feats))
    _write(out_dir / "dataset.csv", "\n".join(lines) + "\n")
    _manifest(cfg, "prep", seed, out_dir)
    return 0


def _train_one(t: Taxonomy, d: Dataset, kind: StrategyKind, cfg: Config,
               seed: int, out_dir: Path):
    tc = _train_config(cfg, seed)
    k = cfg.get_int("split_k")
    model, history = train(
        d, t, kind, tc,
        widths=cfg.get_ints("widths"),
        hidden=cfg.get_int("hidden"),
        dense_connectivity=cfg.get_bool("dense_connectivity"),
        train_splits=tuple(range(k - 1)),
    )
    _write(out_dir / f"model_{kind.value}.bin", save_model(model))
    _write(out_dir / f"history_{kind.value}.csv", history.as_csv())
    return model


def cmd_train(cfg: Config, seed: int, out_dir: Path, args) -> int:
    t = _load_taxonomy(cfg)
    kinds = _strategy_kinds(cfg)
    if len(kinds) != 1:
        raise ConfigError("train takes exactly one strategy; use compare for several")
    d = _resolve_dataset(cfg, t, seed, need_splits=True)
    _train_one(t, d, kinds[0], cfg, seed, out_dir)
    _manifest(cfg, "train", seed, out_dir)
    return 0


def cmd_eval(cfg: Config, seed: int, out_dir: Path, args) -> int:
    t = _load_taxonomy(cfg)
    if "checkpoint" in cfg.values:
        ckpt_path = cfg.get_path("checkpoint")
    else:
        kinds = _strategy_kinds(cfg)
        if len(kinds) != 1:
            raise ConfigError("eval needs `checkpoint = PATH` or exactly one strategy")
        ckpt_path = out_dir / f"model_{kinds[0].value}.bin"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    model = load_model(ckpt_path.read_bytes(), t)
    d = _resolve_dataset(cfg, t, seed, need_splits=True)
    population = args.auc_population or cfg.require("auc_population")
    renorm = cfg.get_bool("renormalize_leaky")
    test_subset = cfg.get_int("split_k") - 1
    report = evaluate(model, d, population=population, test_subset=test_subset,
                      renormalize_leaky=renorm)
    kind = model.kind.value
    _write(out_dir / f"report_{kind}.csv", report.as_csv())
    table2, table3 = format_comparison_tables([report])
    _write(out_dir / f"report_{kind}.txt", table2 + "\n" + table3)
    test = d.subset({test_subset})
    _write(out_dir / f"predictions_{kind}.csv",
           write_predictions(model, test, renormalize_leaky=renorm))
    X = test.features_matrix()
    node_probs, _ = model.predict(X, renormalize_leaky=renorm)
    for tag in t.order:
        if tag == t.root or tag not in report.node_auc:
            continue
        positive = np.array([tag in path_to_root(t, s.leaf) for s in test.samples])
        pts = roc_points(node_probs[tag], positive)
        lines = ["fpr,tpr,threshold"]
        lines += ["%.17g,%.17g,%.17g" % p for p in pts]
        _write(out_dir / f"roc_{tag}.csv", "\n".join(lines) + "\n")
    _manifest(cfg, "eval", seed, out_dir)
    return 0


def _compare_worker(payload):
    """Train + evaluate one strategy in a worker process."""
    (tax_text, csv_text, kind_name, values, strategies, base_dir,
     seed, out_dir, population) = payload
    cfg = Config(values, strategies, Path(base_dir))
    t = parse_taxonomy(tax_text)
    d = load_csv(csv_text, t)
    kind = StrategyKind.parse(kind_name)
    out = Path(out_dir)
    model = _train_one(t, d, kind, cfg, seed, out)
    report = evaluate(
        model, d, population=population,
        test_subset=cfg.get_int("split_k") - 1,
        renormalize_leaky=cfg.get_bool("renormalize_leaky"),
    )
    _write(out / f"report_{kind.value}.csv", report.as_csv())
    return report


def cmd_compare(cfg: Config, seed: int, out_dir: Path, args) -> int:
    t = _load_taxonomy(cfg)
    kinds = _strategy_kinds(cfg, default_all=True)
    d = _resolve_dataset(cfg, t, seed, need_splits=True)
    _write(out_dir / "dataset.csv", write_csv(d))
    population = args.auc_population or cfg.require("auc_population")

    reports = []
    if args.parallel:
        payloads = [
            (t.serialize(), write_csv(d), kind.value, cfg.values, cfg.strategies,
             str(cfg.base_dir), seed, str(out_dir), population)
            for kind in kinds
        ]
        with ProcessPoolExecutor(max_workers=min(len(kinds), 5)) as pool:
            reports = list(pool.map(_compare_worker, payloads))
    else:
        for kind in kinds:
            try:
                model = _train_one(t, d, kind, cfg, seed, out_dir)
                report = evaluate(
                    model, d, population=population,
                    test_subset=cfg.get_int("split_k") - 1,
                    renormalize_leaky=cfg.get_bool("renormalize_leaky"),
                )
            except Exception as e:
                print(
                    f"error: training {kind.value} failed: {e}; partial results "
                    f"kept in {out_dir}", file=sys.stderr,
                )
                raise
            reports.append(report)
            _write(out_dir / f"report_{kind.value}.csv", report.as_csv())
    table2, table3 = format_comparison_tables(reports)
    _write(out_dir / "table2.txt", table2)
    _write(out_dir / "table3.txt", table3)
    _manifest(cfg, "compare", seed, out_dir)
    sys.stdout.write(table2)
    return 0


def cmd_gradcheck(cfg: Config, seed: int, out_dir: Path, args) -> int:
    t = _load_taxonomy(cfg)
    kinds = _strategy_kinds(cfg, default_all=True)
    dim = cfg.get_int("feature_dim")
    tol = cfg.get_float("gradcheck_tol")
    batch = cfg.get_int("gradcheck_batch")
    root = SplitMix64(seed)
    leaf_order = leaves(t)
    all_ok = True
    for kind in kinds:
        model = build_model(
            t, kind, input_dim=dim, widths=cfg.get_ints("widths"),
            hidden=cfg.get_int("hidden"),
            dense_connectivity=cfg.get_bool("dense_connectivity"),
            stream=root.substream(f"init/{kind.value}"),
        )
        perturb_parameters(model, root.substream(f"gradcheck/{kind.value}"))
        x = root.substream(f"gradcheck_x/{kind.value}").fill_gaussian(batch * dim)
        x = x.reshape(batch, dim)
        leafs = [leaf_order[i % len(leaf_order)] for i in range(batch)]
        targets = model.targets_matrix(leafs)
        weights = [np.ones(hm.out.n_out) for hm in model.head_modules]
        err = grad_check(model, (x, targets, weights))
        ok = err <= tol
        all_ok = all_ok and ok
        print(f"{kind.value:16s} max_rel_err={err:.3e} "
              f"{'PASS' if ok else 'FAIL'} (tol {tol:g})")
    return 0 if all_ok else 2


_COMMANDS = {
    "gen": cmd_gen,
    "split": cmd_split,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}

_VALIDATION_ERRORS = (
    ConfigError, TaxonomyError, DataError, VolumeError, CheckpointError,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hiertax",
        description="hierarchical-classification experiment runner",
    )
    parser.add_argument("command", choices=list(_COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--auc-population", choices=["all", "applicable"], default=None)
    parser.add_argument("--parallel", action="store_true",
                        help="train compare strategies in parallel processes")
    args = parser.parse_args(argv)

    try:
        config_path = Path(args.config)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        cfg = Config.parse(config_path.read_text(), config_path.resolve().parent)
        seed = args.seed if args.seed is not None else cfg.get_int("seed")
        out_dir = Path(args.out) if args.out else cfg.get_path("out")
        return _COMMANDS[args.command](cfg, seed, out_dir, args)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
