"""Command-line pipeline: ingest, partition, train, eval, novelty, WL bench, synth.

Every command reads a flat JSON config (keys of :class:`RunConfig`), writes
its artifacts under ``<out>/<stage>/`` and a ``manifest.json`` next to them.
A stage whose manifest (config hash, upstream hashes, seed, versions) is
unchanged and whose outputs exist is skipped.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffcore as dc
from .encoder import EncoderConfig, encode, init_params
from .graph import (
    GraphDataset,
    Splits,
    assemble_test_set,
    cycle_graph,
    disjoint_union,
    load_dataset_npz,
    max_degree,
    parse_tudataset,
    save_dataset_npz,
    split_dataset,
    wl_distinguishable,
    with_degree_features,
    with_label_features,
    write_tudataset,
)
from .oodscore import GaussianStats, ScoredSet
from .substructure import DETECTORS, build_super_graph, detect, load_partitions, novelty_rate, save_partitions
from .synth import SyntheticSpec, generate
from .training import GraphSet, TrainConfig, TrainedModel, round_floats, train

log = logging.getLogger("sgood")

FEATURE_MODES = ("auto", "labels", "raw", "degree", "constant")
SCORE_MODES = ("nearest", "literal-max")
WL_PAIRS = {
    "C6|2C3": (lambda: cycle_graph(6), lambda: disjoint_union(cycle_graph(3), cycle_graph(3))),
    "C8|2C4": (lambda: cycle_graph(8), lambda: disjoint_union(cycle_graph(4), cycle_graph(4))),
    "C10|C4+C6": (lambda: cycle_graph(10), lambda: disjoint_union(cycle_graph(4), cycle_graph(6))),
}


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    id_dir: Optional[str] = None
    id_name: Optional[str] = None
    ood_dir: Optional[str] = None
    ood_name: Optional[str] = None
    detector: str = "modularity"
    feature_mode: str = "auto"
    L1: int = 3
    L2: int = 2
    d: int = 16
    use_super: bool = True
    batch_size: int = 128
    t_pt: int = 100
    t_ft: int = 500
    alpha: float = 0.1
    tau: float = 0.5
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-3
    aug_ratio: float = 0.3
    score_mode: str = "nearest"
    out: str = "runs/default"
    seed: int = 0
    wl_seeds: int = 100
    synth_id_families: tuple = (("triangle", 250), ("pentagon", 250))
    synth_ood_families: tuple = (("square", 100),)
    synth_motifs_per_graph: tuple = (3, 6)
    synth_extra_bridges: int = 0
    synth_bridging: str = "tree"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise CLIError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.detector not in DETECTORS:
            raise CLIError(f"detector must be one of {sorted(DETECTORS)}, got {self.detector!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise CLIError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.score_mode not in SCORE_MODES:
            raise CLIError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if self.seed < 0 or self.wl_seeds < 1:
            raise CLIError("seed must be >= 0 and wl_seeds >= 1")
        try:
            self.train_config()
            self.synth_spec()
            EncoderConfig(1, 1, self.L1, self.L2, self.d, self.use_super)
        except ValueError as e:
            raise CLIError(str(e)) from e

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.t_pt, self.t_ft, self.alpha, self.tau,
                           self.lr_pretrain, self.lr_finetune, self.aug_ratio, self.seed)

    def encoder_config(self, in_dim: int, num_classes: int) -> EncoderConfig:
        return EncoderConfig(in_dim, num_classes, self.L1, self.L2, self.d, self.use_super)

    def synth_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            tuple((str(m), int(n)) for m, n in self.synth_id_families),
            tuple((str(m), int(n)) for m, n in self.synth_ood_families),
            tuple(int(x) for x in self.synth_motifs_per_graph),
            int(self.synth_extra_bridges),
            self.synth_bridging,
        )

    def subset(self, *keys) -> dict:
        d = asdict(self)
        return {k: d[k] for k in keys}


# --------------------------------------------------------------------------
# helpers


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, floats at 10 significant digits."""
    return json.dumps(round_floats(json.loads(json.dumps(obj, default=_jsonable))), sort_keys=True, indent=1) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj), encoding="utf-8")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def versions() -> dict:
    import scipy

    try:
        from importlib.metadata import version

        pkg = version("artifact")
    except Exception:  # not installed (running from a source tree)
        pkg = "unknown"
    return {"sgood": pkg, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": ".".join(platform.python_version_tuple()[:2])}


def manifest(command: str, cfg: RunConfig, keys, inputs: dict) -> dict:
    return {
        "command": command,
        "config_hash": sha256_text(dumps(cfg.subset(*keys))),
        "config": cfg.subset(*keys),
        "inputs": inputs,
        "seed": cfg.seed,
        "versions": versions(),
    }


def stage_dir(cfg: RunConfig, stage: str) -> Path:
    p = Path(cfg.out) / stage
    p.mkdir(parents=True, exist_ok=True)
    return p


def is_cached(d: Path, man: dict, outputs) -> bool:
    m = d / "manifest.json"
    if m.exists() and m.read_text(encoding="utf-8") == dumps(man) and all((d / o).exists() for o in outputs):
        log.info("%s: cached, skipping", d.name)
        return True
    return False


def require(d: Path, *names) -> None:
    missing = [n for n in names if not (d / n).exists()]
    if missing:
        raise CLIError(f"missing upstream artifacts in {d}: {missing} (run the earlier stage first)")


def manifest_hash(d: Path) -> str:
    require(d, "manifest.json")
    return hashlib.sha256((d / "manifest.json").read_bytes()).hexdigest()


def featurize_pair(id_ds: GraphDataset, ood_ds: GraphDataset, mode: str):
    """Give ID and OOD graphs features of the same meaning and width.

    ``auto`` picks shared node-label one-hots, else raw attributes, else
    degree one-hots over the joint maximum degree.
    """
    both_labels = all(g.node_labels is not None for ds in (id_ds, ood_ds) for g in ds)
    if mode == "auto":
        if both_labels and len(id_ds) and len(ood_ds):
            mode = "labels"
        elif id_ds.feature_width and id_ds.feature_width == ood_ds.feature_width:
            mode = "raw"
        else:
            mode = "degree"
    if mode == "raw":
        if not id_ds.feature_width or id_ds.feature_width != ood_ds.feature_width:
            raise CLIError("raw features need equal non-zero widths in ID and OOD data")
        return id_ds, ood_ds, mode
    if mode == "degree":
        md = max_degree(id_ds, ood_ds)
        return with_degree_features(id_ds, md), with_degree_features(ood_ds, md), mode
    if mode == "constant":
        const = [ds.replace_graphs([g.with_features(np.ones((g.node_count, 1))) for g in ds], feature_width=1)
                 for ds in (id_ds, ood_ds)]
        return const[0], const[1], mode
    # labels: attribute columns (when both have the same width) then one-hot over the shared label vocabulary
    if not both_labels:
        raise CLIError("feature_mode=labels needs node labels in both datasets")
    vocab = sorted(set(id_ds.node_label_values) | set(ood_ds.node_label_values))
    keep_attrs = id_ds.attribute_width and id_ds.attribute_width == ood_ds.attribute_width
    out = []
    for ds in (id_ds, ood_ds):
        lab = with_label_features(ds, vocab)
        if keep_attrs:
            graphs = [g.with_features(np.concatenate([o.features[:, :ds.attribute_width], g.features], axis=1))
                      for g, o in zip(lab.graphs, ds.graphs)]
            lab = lab.replace_graphs(graphs, feature_width=ds.attribute_width + len(vocab))
        out.append(lab)
    return out[0], out[1], mode


def _graph_set(ds: GraphDataset, parts, supers, idx) -> GraphSet:
    return GraphSet([ds[i] for i in idx], [parts[i] for i in idx], [supers[i] for i in idx])


def load_stage_data(cfg: RunConfig):
    ing, par = Path(cfg.out) / "ingest", Path(cfg.out) / "partition"
    require(ing, "id.npz", "ood.npz", "splits.json")
    require(par, "id.json", "ood.json")
    id_ds, ood_ds = load_dataset_npz(ing / "id.npz"), load_dataset_npz(ing / "ood.npz")
    splits = Splits.from_dict(json.loads((ing / "splits.json").read_text(encoding="utf-8")))
    id_parts, id_supers = load_partitions(par / "id.json", detector=cfg.detector)
    ood_parts, ood_supers = load_partitions(par / "ood.json", detector=cfg.detector)
    return id_ds, ood_ds, splits, (id_parts, id_supers), (ood_parts, ood_supers)


# --------------------------------------------------------------------------
# commands

# directories are left out: the source-file hash pins their content
INGEST_KEYS = ("id_name", "ood_name", "feature_mode", "seed")
TRAIN_KEYS = ("detector", "L1", "L2", "d", "use_super", "batch_size", "t_pt", "t_ft", "alpha", "tau",
              "lr_pretrain", "lr_finetune", "aug_ratio", "seed")


def cmd_ingest(cfg: RunConfig) -> Path:
    for k in ("id_dir", "id_name", "ood_dir", "ood_name"):
        if getattr(cfg, k) is None:
            raise CLIError(f"config key {k!r} is required for ingest")
    for k in ("id_dir", "ood_dir"):
        if not Path(getattr(cfg, k)).is_dir():
            raise CLIError(f"{k} does not exist: {getattr(cfg, k)}")
    src = list(Path(cfg.id_dir).glob(f"{cfg.id_name}_*.txt")) + list(Path(cfg.ood_dir).glob(f"{cfg.ood_name}_*.txt"))
    d = stage_dir(cfg, "ingest")
    man = manifest("ingest", cfg, INGEST_KEYS, {"source_files": sha256_files(src)})
    if is_cached(d, man, ["id.npz", "ood.npz", "splits.json"]):
        return d
    id_raw = parse_tudataset(cfg.id_dir, cfg.id_name)
    ood_raw = parse_tudataset(cfg.ood_dir, cfg.ood_name)
    id_ds, ood_ds, mode = featurize_pair(id_raw, ood_raw, cfg.feature_mode)
    splits = assemble_test_set(split_dataset(id_ds, seed=cfg.seed), ood_ds, seed=cfg.seed)
    save_dataset_npz(id_ds, d / "id.npz")
    save_dataset_npz(ood_ds, d / "ood.npz")
    sizes = {k: len(v) for k, v in splits.to_dict().items()}
    write_json(d / "splits.json", splits.to_dict())
    write_json(d / "summary.json", {"feature_mode": mode, "feature_width": id_ds.feature_width,
                                    "num_classes": id_ds.num_classes, "sizes": sizes})
    write_json(d / "manifest.json", man)
    log.info("ingest: %s", sizes)
    return d


def cmd_partition(cfg: RunConfig) -> Path:
    ing = Path(cfg.out) / "ingest"
    require(ing, "id.npz", "ood.npz")
    d = stage_dir(cfg, "partition")
    man = manifest("partition", cfg, ("detector", "seed"), {"ingest": manifest_hash(ing)})
    if is_cached(d, man, ["id.json", "ood.json"]):
        return d
    for tag in ("id", "ood"):
        ds = load_dataset_npz(ing / f"{tag}.npz")
        parts = [detect(g, cfg.detector, cfg.seed) for g in ds]
        save_partitions(d / f"{tag}.json", ds.name, cfg.detector, ds.graphs, parts)
    write_json(d / "manifest.json", man)
    return d


def cmd_train(cfg: RunConfig) -> Path:
    par = Path(cfg.out) / "partition"
    d = stage_dir(cfg, "train")
    man = manifest("train", cfg, TRAIN_KEYS, {"partition": manifest_hash(par)})
    outputs = ["checkpoint.bin", "gaussian.npz", "report.json", "encoder.json"]
    if is_cached(d, man, outputs):
        return d
    id_ds, _, splits, (parts, supers), _ = load_stage_data(cfg)
    enc = cfg.encoder_config(id_ds.feature_width, id_ds.num_classes)
    model = train(_graph_set(id_ds, parts, supers, splits.train), _graph_set(id_ds, parts, supers, splits.val),
                  enc, cfg.train_config())
    dc.save_checkpoint(d / "checkpoint.bin", model.params)
    with open(d / "gaussian.npz", "wb") as fh:
        model.stats.save(fh)
    (d / "report.json").write_text(model.report.to_json() + "\n", encoding="utf-8")
    (d / "encoder.json").write_text(enc.to_json() + "\n", encoding="utf-8")
    write_json(d / "manifest.json", man)
    log.info("train: best epoch %s, %.1fs", model.report.best_epoch, model.report.wall_clock)
    return d


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str] = None) -> Path:
    tr = Path(cfg.out) / "train"
    ckpt = Path(checkpoint) if checkpoint else tr / "checkpoint.bin"
    if not ckpt.exists():
        raise CLIError(f"checkpoint not found: {ckpt}")
    require(tr, "gaussian.npz", "encoder.json")
    d = stage_dir(cfg, "eval")
    man = manifest("eval", cfg, ("detector", "score_mode", "seed"),
                   {"train": manifest_hash(tr), "checkpoint": sha256_files([ckpt])})
    if is_cached(d, man, ["metrics.json", "scores.csv"]):
        return d
    id_ds, ood_ds, splits, (ip, isup), (op, osup) = load_stage_data(cfg)
    enc = EncoderConfig.from_json((tr / "encoder.json").read_text(encoding="utf-8"))
    model = TrainedModel(dc.load_checkpoint(ckpt), enc, GaussianStats.load(tr / "gaussian.npz"), None)
    s_id, l_id = model.score(_graph_set(id_ds, ip, isup, splits.test_id), cfg.score_mode)
    s_ood, l_ood = model.score(_graph_set(ood_ds, op, osup, splits.test_ood), cfg.score_mode)
    scored = ScoredSet(np.r_[s_id, s_ood], np.r_[np.zeros(len(s_id)), np.ones(len(s_ood))], np.r_[l_id, l_ood])
    metrics = scored.metrics(id_labels=[id_ds[i].label for i in splits.test_id])
    metrics.update(score_mode=cfg.score_mode, n_id=len(s_id), n_ood=len(s_ood))
    scored.write_csv(d / "scores.csv")
    write_json(d / "metrics.json", metrics)
    write_json(d / "manifest.json", man)
    log.info("eval: %s", {k: metrics[k] for k in ("auroc", "aupr", "fpr95")})
    return d


def cmd_analyze_novelty(cfg: RunConfig) -> Path:
    """Share of OOD test graphs owning a substructure never seen in ID training graphs."""
    par = Path(cfg.out) / "partition"
    d = stage_dir(cfg, "novelty")
    man = manifest("analyze-novelty", cfg, ("detector", "seed"), {"partition": manifest_hash(par)})
    if is_cached(d, man, ["novelty.json"]):
        return d
    id_ds, ood_ds, splits, (ip, _), (op, _) = load_stage_data(cfg)
    rate = novelty_rate([(id_ds[i], ip[i]) for i in splits.train], [(ood_ds[i], op[i]) for i in splits.test_ood])
    write_json(d / "novelty.json", {"dataset": id_ds.name, "ood_dataset": ood_ds.name,
                                    "detector": cfg.detector, "novelty_rate": rate})
    write_json(d / "manifest.json", man)
    return d


def wl_pair_report(g1, g2, cfg: RunConfig, tol: float = 1e-6) -> dict:
    """1-WL verdict plus how often random-init substructure embeddings tell the pair apart."""
    g1, g2 = (g.with_features(np.ones((g.node_count, 1))) for g in (g1, g2))
    items = []
    for g in (g1, g2):
        p = detect(g, cfg.detector, cfg.seed)
        items.append((g, p, build_super_graph(g, p)))
    enc = cfg.encoder_config(1, 1)
    hits, gaps = 0, []
    for s in range(cfg.seed, cfg.seed + cfg.wl_seeds):
        params = init_params(enc, s)
        e1, e2 = (encode(g, p, sg, params, enc) for g, p, sg in items)
        a, b = (e.h_sup if e.h_sup is not None else e.h_G for e in (e1, e2))
        gap = float(np.linalg.norm(a - b))
        gaps.append(gap)
        hits += gap > tol
    return {
        "wl_distinguishable": wl_distinguishable(g1, g2, iterations=max(g1.node_count, g2.node_count)),
        "separation_rate": hits / cfg.wl_seeds,
        "min_gap": min(gaps),
        "seeds": cfg.wl_seeds,
    }


def cmd_wlbench(cfg: RunConfig) -> Path:
    d = stage_dir(cfg, "wl_bench")
    man = manifest("wl-bench", cfg, ("detector", "L1", "L2", "d", "use_super", "seed", "wl_seeds"), {})
    if is_cached(d, man, ["wl_bench.json"]):
        return d
    res = {name: wl_pair_report(a(), b(), cfg) for name, (a, b) in WL_PAIRS.items()}
    write_json(d / "wl_bench.json", res)
    write_json(d / "manifest.json", man)
    return d


def cmd_synth(cfg: RunConfig) -> Path:
    d = stage_dir(cfg, "synth")
    keys = ("synth_id_families", "synth_ood_families", "synth_motifs_per_graph", "synth_extra_bridges",
            "synth_bridging", "seed")
    man = manifest("synth", cfg, keys, {})
    if is_cached(d, man, ["SYNTH_ID_A.txt", "SYNTH_OOD_A.txt"]):
        return d
    id_ds, ood_ds = generate(cfg.synth_spec(), seed=cfg.seed, featurized=False)
    write_tudataset(id_ds, d, "SYNTH_ID")
    write_tudataset(ood_ds, d, "SYNTH_OOD")
    write_json(d / "manifest.json", man)
    return d


COMMANDS = {
    "ingest": cmd_ingest,
    "partition": cmd_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-novelty": cmd_analyze_novelty,
    "wl-bench": cmd_wlbench,
    "synth": cmd_synth,
}


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CLIError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CLIError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise CLIError(f"{p}: config must be a flat JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgood", description="Substructure-aware graph OOD detection pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--detector", choices=sorted(DETECTORS))
        p.add_argument("--score-mode", dest="score_mode", choices=SCORE_MODES)
        if name == "eval":
            p.add_argument("--checkpoint", help="defaults to <out>/train/checkpoint.bin")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "detector": args.detector,
                                        "score_mode": args.score_mode})
        if args.command == "eval":
            out = cmd_eval(cfg, args.checkpoint)
        else:
            out = COMMANDS[args.command](cfg)
    except (CLIError, FileNotFoundError, ValueError) as e:
        print(f"sgood {args.command}: error: {e}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
