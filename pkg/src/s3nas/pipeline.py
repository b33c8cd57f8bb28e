"""Experiment commands: data, supernet training, space evolution, search and reports.

Each command reads a :class:`RunConfig`, writes its artifacts under the
output directory and records them in ``manifest.json``. Commands are
idempotent: rerunning with the same config rewrites identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, canonical_json
from .cost import flop_count, param_count
from .data import Dataset, generate_synthetic, load_flat, save_flat, standardize
from .evaluator import (CachedOracle, SupernetOracle, TabularOracle, edf, et_error,
                        sample_constrained)
from .evolution import evolutionary_search, evolve_space
from .space import DimensionKind, NUM_STAGES, SearchSpace, decode, encode, extreme_architecture, partition_by_choice
from .supernet import (ElasticBounds, Supernet, attention_stats, evaluate, retrain_standalone,
                       train_supernet)

log = logging.getLogger("s3nas")

SEED_LABELS = ("data", "train", "sample", "search", "ablate", "attention")


# ---------------------------------------------------------------------------
# small io helpers
# ---------------------------------------------------------------------------

def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_json(path: Path, doc) -> Path:
    return write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return write_text(path, buf.getvalue())


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def update_manifest(cfg: RunConfig, out: Path, command: str, outputs: Sequence[Path]) -> Path:
    path = out / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    if doc.get("config_hash") not in (None, cfg.config_hash()):
        doc = {}  # different config: previous entries are stale
    doc.update({
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.seed,
        "seeds": {label: cfg.seed_for(label) for label in SEED_LABELS},
        "versions": {"s3nas": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    })
    doc.setdefault("commands", {})[command] = {
        "outputs": {str(p.relative_to(out)): sha256(p) for p in sorted(set(outputs))}}
    return write_json(path, doc)


# ---------------------------------------------------------------------------
# data and oracles
# ---------------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.train_path and d.val_path:
        return load_flat(d.train_path), load_flat(d.val_path)
    return generate_synthetic(cfg.seed_for("data"), d.n_train, d.n_val, d.side, d.classes,
                              d.channels, d.noise, d.contrast)


def model_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """The splits as networks consume them (standardized unless disabled)."""
    train, val = load_data(cfg)
    return standardize(train, val) if cfg.data.standardize else (train, val)


def window_admissible(cfg: RunConfig):
    """Windows must tile their stage's feature map."""
    def ok(kind: DimensionKind, stage: int, value) -> bool:
        return kind is not DimensionKind.WINDOW_SIZE or cfg.shape.stage_side(stage) % int(value) == 0
    return ok


def _space_key(space: SearchSpace) -> str:
    return canonical_json(space.to_dict())


class SupernetProvider:
    """Trains (or reuses) one supernet per space and exposes it as an oracle."""

    def __init__(self, cfg: RunConfig, train: Dataset, val: Dataset, out: Path | None = None):
        self.cfg, self.train, self.val, self.out = cfg, train, val, out
        self.nets: dict[str, Supernet] = {}
        self.previous: Supernet | None = None
        self.trained: list[Path] = []

    def supernet(self, space: SearchSpace, label: str = "supernet") -> Supernet:
        key = _space_key(space)
        if key in self.nets:
            return self.nets[key]
        bounds = ElasticBounds.from_space(space, self.cfg.shape)
        net = self._load(space, bounds, label)
        if net is None:
            seed = int(np.random.SeedSequence([self.cfg.seed_for("train"), len(self.nets)]).generate_state(1)[0])
            if self.cfg.oracle.retrain == "finetune" and self.previous is not None:
                net = Supernet.grown_from(self.previous, bounds, seed)
            else:
                net = Supernet(bounds, seed)
            log.info("training supernet %s for %d steps", label, self.cfg.train.steps)
            history = train_supernet(net, space, self.train, self.cfg.train, seed, log.info)
            if self.out is not None:
                self._save(net, space, label, history)
        self.nets[key] = self.previous = net
        return net

    def _paths(self, label: str) -> tuple[Path, Path, Path]:
        base = self.out / "checkpoints"
        return base / f"{label}.ckpt", base / f"{label}_space.json", base / f"{label}_train.csv"

    def _load(self, space: SearchSpace, bounds: ElasticBounds, label: str) -> Supernet | None:
        if self.out is None:
            return None
        ckpt, sp, _ = self._paths(label)
        stamp = ckpt.with_suffix(".hash")
        if ckpt.exists() and sp.exists() and stamp.exists() and sp.read_text() == space.to_json() \
                and stamp.read_text() == self._train_hash():
            log.info("reusing %s", ckpt)
            self.trained += [ckpt, sp, self._paths(label)[2]]
            return Supernet.load(ckpt, bounds)
        return None

    def _train_hash(self) -> str:
        # resolved values, so a changed default also invalidates old checkpoints
        c = self.cfg
        doc = {"data": dataclasses.asdict(c.data), "shape": dataclasses.asdict(c.shape),
               "train": dataclasses.asdict(c.train), "seed": c.seed, "retrain": c.oracle.retrain}
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()

    def _save(self, net: Supernet, space: SearchSpace, label: str, history) -> None:
        ckpt, sp, tr = self._paths(label)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        net.save(ckpt)
        write_text(sp, space.to_json())
        write_text(ckpt.with_suffix(".hash"), self._train_hash())
        write_csv(tr, ["step", "loss_max", "loss_min", "loss_rand1", "loss_rand2"],
                  [[i] + [float(v) for v in row] for i, row in enumerate(history)])
        self.trained += [ckpt, sp, tr]

    def for_space(self, space: SearchSpace, t: int) -> SupernetOracle:
        return SupernetOracle(self.supernet(space, f"supernet_t{t}"), self.val, self.cfg.oracle.eval_batch)


def make_oracle(cfg: RunConfig, out: Path | None = None):
    if cfg.oracle.kind == "tabular":
        return TabularOracle(cfg.tabular)
    train, val = model_data(cfg)
    return SupernetProvider(cfg, train, val, out)


def supernet_provider(cfg: RunConfig, out: Path | None = None) -> SupernetProvider:
    train, val = model_data(cfg)
    return SupernetProvider(cfg, train, val, out)


def _label(cfg: RunConfig, space: SearchSpace) -> str:
    # the initial space's supernet is the first one evolve-space trains; share its checkpoint
    return "supernet_t0" if space == cfg.space else "supernet"


def _oracle_for(oracle, space: SearchSpace) -> CachedOracle:
    if isinstance(oracle, SupernetProvider):
        return SupernetOracle(oracle.supernet(space, _label(oracle.cfg, space)), oracle.val,
                              oracle.cfg.oracle.eval_batch)
    return oracle


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@dataclass
class CommandResult:
    outputs: list[Path]
    summary: dict


def cmd_gen_data(cfg: RunConfig, out: Path, workers: int = 1) -> CommandResult:
    train, val = load_data(cfg)
    paths = [out / "data" / "train.s3ds", out / "data" / "val.s3ds"]
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    save_flat(train, paths[0])
    save_flat(val, paths[1])
    return CommandResult(paths, {"train": len(train), "val": len(val)})


def cmd_train(cfg: RunConfig, out: Path, workers: int = 1) -> CommandResult:
    provider = supernet_provider(cfg, out)
    provider.supernet(cfg.space, _label(cfg, cfg.space))
    return CommandResult(provider.trained, {"checkpoint": "checkpoints/supernet_t0.ckpt"})


def _edf_rows(errors):
    return [[e, f] for e, f in edf(errors)]


def cmd_evolve_space(cfg: RunConfig, out: Path, workers: int = 1) -> CommandResult:
    oracle = make_oracle(cfg, out)
    history = evolve_space(cfg.space, oracle, cfg.budget, cfg.evolution, cfg.seed_for("sample"),
                           cfg.shape, cfg.search, window_admissible(cfg), workers)
    outputs = [write_text(out / "space_history.json", history.to_json())]
    for it in history.iterations:
        outputs.append(write_text(out / "spaces" / f"space_{it.t}.json", it.space.to_json()))
        if it.report is not None:
            outputs.append(write_csv(out / "edf" / f"space_{it.t}.csv", ["error", "F"],
                                     _edf_rows(it.report.errors)))
    if isinstance(oracle, SupernetProvider):
        outputs += oracle.trained
    for w in history.warnings:
        log.warning(w)
    final = history.iterations[-1]
    return CommandResult(outputs, {"iterations": len(history.iterations),
                                   "final_q": None if final.report is None else final.report.q})


def _resolve_space(cfg: RunConfig, space_path: str | None) -> SearchSpace:
    return SearchSpace.load(space_path) if space_path else cfg.space


def cmd_search(cfg: RunConfig, out: Path, workers: int = 1, space_path: str | None = None) -> CommandResult:
    space = _resolve_space(cfg, space_path)
    oracle = _oracle_for(make_oracle(cfg, out), space)
    res = evolutionary_search(space, oracle, cfg.budget, cfg.search, cfg.seed_for("search"), cfg.shape, workers)
    outputs = [write_text(out / "search" / "log.csv", res.log_csv()),
               write_json(out / "search" / "best.json", res.to_dict())]
    return CommandResult(outputs, res.to_dict())


def cmd_eval(cfg: RunConfig, out: Path, workers: int = 1, archs: Sequence[str] = (), n: int = 20,
             space_path: str | None = None) -> CommandResult:
    space = _resolve_space(cfg, space_path)
    oracle = _oracle_for(make_oracle(cfg, out), space)
    chosen = [decode(a) for a in archs] or sample_constrained(space, cfg.shape, cfg.budget, n, cfg.rng("sample"))
    errs = oracle.evaluate_many(chosen, workers)
    rows = sorted([encode(a), param_count(a, cfg.shape), flop_count(a, cfg.shape), e] for a, e in zip(chosen, errs))
    report = et_error([(r[0], r[3]) for r in rows], None, cfg.budget)
    outputs = [write_csv(out / "eval" / "errors.csv", ["encoding", "params", "macs", "error"], rows),
               write_text(out / "eval" / "et_report.json", report.to_json() + "\n")]
    return CommandResult(outputs, {"q_e": report.q_e, "q_t": report.q_t, "q": report.q})


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    if len(set(x)) < 2 or len(set(y)) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def cmd_ablate_inherit(cfg: RunConfig, out: Path, workers: int = 1, space_path: str | None = None) -> CommandResult:
    space = _resolve_space(cfg, space_path)
    provider = supernet_provider(cfg, out)
    net = provider.supernet(space, _label(cfg, space))
    rng = cfg.rng("ablate")
    archs = sample_constrained(space, cfg.shape, cfg.budget, cfg.ablation.archs, rng)
    rows = []
    for i, a in enumerate(archs):
        inherited = evaluate(net, a, provider.val, cfg.oracle.eval_batch)
        seed = int(np.random.SeedSequence([cfg.seed_for("ablate"), i]).generate_state(1)[0])
        _, retrained = retrain_standalone(a, cfg.shape, provider.train, provider.val, cfg.ablation.epochs,
                                          seed, cfg.train)
        log.info("ablation %d/%d: inherited %.4f retrained %.4f", i + 1, len(archs), inherited, retrained)
        rows.append([encode(a), param_count(a, cfg.shape), inherited, retrained])
    inh, ret = [r[2] for r in rows], [r[3] for r in rows]
    summary = {"n": len(rows), "mean_abs_gap": float(np.mean(np.abs(np.subtract(inh, ret)))),
               "spearman": spearman(inh, ret)}
    outputs = [write_csv(out / "ablation" / "inherit_vs_retrain.csv",
                         ["encoding", "params", "inherited_error", "retrained_error"], rows),
               write_json(out / "ablation" / "summary.json", summary)] + provider.trained
    return CommandResult(outputs, summary)


def cmd_analyze_attention(cfg: RunConfig, out: Path, workers: int = 1, space_path: str | None = None,
                          arch: str | None = None) -> CommandResult:
    space = _resolve_space(cfg, space_path)
    provider = supernet_provider(cfg, out)
    net = provider.supernet(space, _label(cfg, space))
    target = decode(arch) if arch else extreme_architecture(space, largest=True)
    idx = cfg.rng("attention").choice(len(provider.val), min(cfg.attention.images, len(provider.val)),
                                      replace=False)
    rows = attention_stats(net, target, provider.val.images[np.sort(idx)], cfg.attention.k)
    outputs = [write_csv(out / "attention" / "topk_distance.csv",
                         ["stage", "block", "window", "k", "mean", "median", "max"],
                         [[r[c] for c in ("stage", "block", "window", "k", "mean", "median", "max")]
                          for r in rows])] + provider.trained
    return CommandResult(outputs, {"arch": encode(target), "layers": len(rows)})


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _load_history(out: Path) -> dict:
    path = out / "space_history.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing: run evolve-space first")
    return json.loads(path.read_text())


def cmd_report(cfg: RunConfig, out: Path, workers: int = 1) -> CommandResult:
    hist = _load_history(out)
    rep = out / "report"
    edf_rows, stage_rows, tier_rows, traj_rows, cmp_rows = [], [], [], [], []
    for it in hist["iterations"]:
        t = it["t"]
        space = SearchSpace.from_dict(it["space"])
        for sub in space.subspaces:
            traj_rows.append([t, sub.stage, sub.kind.value, " ".join(str(c) for c in sub.choices)])
        report = it["report"]
        if report is None:
            continue
        samples = [(decode(s["arch"]), s["error"]) for s in report["samples"]]
        edf_rows += [[t, e, f] for e, f in edf([e for _, e in samples])]
        for stage in range(1, NUM_STAGES + 1):
            for depth, errs in partition_by_choice(samples, DimensionKind.DEPTH, stage).items():
                stage_rows += [[t, stage, depth, e, f] for e, f in edf(errs)]
                r = et_error(errs)
                tier_rows.append([t, stage, depth, len(errs), r.q_t, r.q_e])
        s = it.get("search") or {}
        cmp_rows.append([t, it["cardinality"], report["q_e"], report["q_t"], report["q"],
                         s.get("best", ""), s.get("error", ""), s.get("params", ""), s.get("macs", "")])
    outputs = [
        write_csv(rep / "edf_by_space.csv", ["space", "error", "F"], edf_rows),
        write_csv(rep / "stage_depth_edf.csv", ["space", "stage", "depth", "error", "F"], stage_rows),
        write_csv(rep / "stage_top_tier.csv", ["space", "stage", "depth", "n", "q_t", "q_e"], tier_rows),
        write_csv(rep / "trajectories.csv", ["space", "stage", "kind", "choices"], traj_rows),
        write_csv(rep / "space_comparison.csv",
                  ["space", "cardinality", "q_e", "q_t", "q", "best_arch", "best_error", "params", "macs"],
                  cmp_rows),
    ]
    extra = {}
    for name in ("ablation/summary.json",):
        if (out / name).exists():
            extra[name] = json.loads((out / name).read_text())
    summary = {"spaces": len(hist["iterations"]), "comparison": [
        {"space": r[0], "q": r[4], "best_error": r[6]} for r in cmp_rows], **extra}
    outputs.append(write_json(rep / "summary.json", summary))
    return CommandResult(outputs, summary)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evolve-space": cmd_evolve_space,
    "search": cmd_search,
    "eval": cmd_eval,
    "ablate-inherit": cmd_ablate_inherit,
    "analyze-attention": cmd_analyze_attention,
    "report": cmd_report,
}


def run(command: str, cfg: RunConfig, workers: int = 1, **kwargs) -> CommandResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = COMMANDS[command](cfg, out, workers, **kwargs)
    update_manifest(cfg, out, command, [p for p in result.outputs if p.exists()])
    return result
