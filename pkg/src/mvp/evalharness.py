"""Speaker-independent stratified cross-validation, metrics and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .audio import AugmentConfig, load_wav, resample
from .model import DecisionCombination, FeatureStore, Item, RunContext, StrategySpec, build_model, save_checkpoint
from .optim import TrainConfig, train_fold

GROUPS = {
    "single-sent": "Single-source",
    "single-vowel": "Single-source",
    "single-mix": "Single-source",
    "wc": "Waveform concatenation",
    "dlc": "Decision-level combination",
}
GROUP_ORDER = ("Single-source", "Waveform concatenation", "Feature fusion", "Decision-level combination")
CSV_FIELDS = (
    "strategy",
    "group",
    "folds",
    "accuracy_mean",
    "accuracy_std",
    "macro_f1_mean",
    "macro_f1_std",
    "auc_mean",
    "auc_std",
    "config_hash",
    "status",
    "notes",
)


def strategy_group(name: str) -> str:
    return GROUPS.get(name.split("@")[0], "Feature fusion")


# ---------------------------------------------------------------- manifests


@dataclass
class SubjectRecord:
    subject_id: str
    label: int
    vowel_path: str
    sentence_path: str

    def __post_init__(self):
        self.label = int(self.label)
        if self.label not in (0, 1):
            raise ValueError(f"{self.subject_id}: label must be 0 or 1, got {self.label}")


def load_manifest(path) -> list[SubjectRecord]:
    """Read a JSONL manifest; relative audio paths resolve against its folder."""
    path = Path(path)
    base = path.parent
    records, seen = [], set()
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                rec = SubjectRecord(
                    str(row["subject_id"]),
                    row["label"],
                    str(base / row["vowel_path"]),
                    str(base / row["sentence_path"]),
                )
            except KeyError as e:
                raise ValueError(f"{path}:{n}: missing field {e}") from None
            if rec.subject_id in seen:
                raise ValueError(f"{path}:{n}: duplicate subject_id {rec.subject_id}")
            seen.add(rec.subject_id)
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: manifest is empty")
    return records


def load_items(records: list[SubjectRecord]) -> list[Item]:
    items = []
    for r in records:
        waves = {"vowel": resample(load_wav(r.vowel_path)), "sentence": resample(load_wav(r.sentence_path))}
        items.append(Item(r.subject_id, r.label, waves))
    return items


# ---------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    k: int
    seed: int
    test: list[list[str]]
    val: list[list[str]]
    all_ids: list[str] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)

    def train(self, f: int) -> list[str]:
        held = set(self.test[f]) | set(self.val[f])
        return [s for s in self.all_ids if s not in held]

    def audit(self) -> list[str]:
        """Problems with the plan; an empty list means every invariant holds."""
        issues = []
        flat = [s for t in self.test for s in t]
        if sorted(flat) != sorted(self.all_ids):
            issues.append("test folds do not partition the subjects")
        for f in range(self.k):
            t, v, tr = set(self.test[f]), set(self.val[f]), set(self.train(f))
            if t & v or t & tr or v & tr:
                issues.append(f"fold {f}: train/val/test overlap")
        if self.labels:
            share = sum(self.labels.values()) / len(self.labels)
            for f, t in enumerate(self.test):
                n_pos = sum(self.labels[s] for s in t)
                if abs(n_pos - share * len(t)) > 1.0:
                    issues.append(f"fold {f}: {n_pos} of {len(t)} pathological, global share {share:.3f}")
        return issues


def _seeded_perm(n: int, seed: int, salt: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, salt])).permutation(n)


def make_folds(records, k: int = 10, seed: int = 0, val_fraction: float = 0.1) -> FoldPlan:
    """Label-stratified round-robin folds after a seeded within-class shuffle.

    The round-robin offset continues from one class to the next, so fold sizes
    differ by at most one and each fold's class counts are within one of the
    global share. Each fold's inner validation set takes ``val_fraction`` of
    every class among its training subjects (at least one each).
    """
    ids = [r.subject_id for r in records]
    labels = np.array([r.label for r in records])
    if k < 2:
        raise ValueError("need k >= 2 folds")
    counts = {c: int((labels == c).sum()) for c in (0, 1)}
    if min(counts.values()) < k:
        raise ValueError(f"each class needs at least k={k} subjects; got healthy={counts[0]}, pathological={counts[1]}")
    fold_of: dict[str, int] = {}
    offset = 0
    for c in (0, 1):
        members = [ids[i] for i in np.flatnonzero(labels == c)]
        for j, p in enumerate(_seeded_perm(len(members), seed, 17 + c)):
            fold_of[members[p]] = (offset + j) % k
        offset += len(members)
    test = [[s for s in ids if fold_of[s] == f] for f in range(k)]
    label_of = dict(zip(ids, labels))
    val = []
    for f in range(k):
        chosen = []
        for c in (0, 1):
            pool = [s for s in ids if fold_of[s] != f and label_of[s] == c]
            n_val = max(1, int(round(val_fraction * len(pool))))
            perm = _seeded_perm(len(pool), seed, 1000 + 2 * f + c)
            chosen += sorted(pool[i] for i in perm[:n_val])
        val.append(chosen)
    return FoldPlan(k, seed, test, val, ids, {s: int(y) for s, y in label_of.items()})


# ---------------------------------------------------------------- metrics


def _check_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    s, y = _check_scores(scores, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy_and_macro_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    s, y = _check_scores(scores, labels)
    if s.size == 0:
        raise ValueError("no scores")
    pred = (s >= threshold).astype(int)
    acc = float((pred == y).mean())
    f1s = []
    for c in (0, 1):
        tp = int(((pred == c) & (y == c)).sum())
        denom = int((pred == c).sum()) + int((y == c).sum())
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return acc, float(np.mean(f1s))


@dataclass
class FoldMetrics:
    accuracy: float
    macro_f1: float
    auc: float


@dataclass
class MetricsReport:
    strategy: str
    per_fold: list[FoldMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    config_hash: str = ""
    status: str = "ok"
    notes: str = ""

    @property
    def group(self) -> str:
        return strategy_group(self.strategy)

    def row(self) -> dict:
        row = {"strategy": self.strategy, "group": self.group, "folds": len(self.per_fold)}
        for m in ("accuracy", "macro_f1", "auc"):
            row[f"{m}_mean"] = _fmt(self.mean.get(m, math.nan))
            row[f"{m}_std"] = _fmt(self.std.get(m, math.nan))
        row.update(config_hash=self.config_hash, status=self.status, notes=self.notes)
        return row


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.6f}"


def aggregate(per_fold: list[FoldMetrics], strategy: str = "", config_hash: str = "", notes: str = "") -> MetricsReport:
    """Mean and population standard deviation of each metric over folds."""
    if not per_fold:
        raise ValueError("aggregate needs at least one fold")
    mean, std = {}, {}
    for m in ("accuracy", "macro_f1", "auc"):
        vals = np.array([getattr(f, m) for f in per_fold], dtype=np.float64)
        mean[m] = float(vals.mean())
        std[m] = float(vals.std(ddof=0))
    return MetricsReport(strategy, list(per_fold), mean, std, config_hash, "ok", notes)


def failed_report(strategy: str, config_hash: str, diagnostic: str) -> MetricsReport:
    nan = {m: math.nan for m in ("accuracy", "macro_f1", "auc")}
    return MetricsReport(strategy, [], nan, dict(nan), config_hash, "failed", diagnostic)


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def _cell(mean: str, std: str) -> str:
    if mean == "nan":
        return "failed"
    return f"{float(mean):.3f}±{float(std):.3f}"


def render_table(rows: list[dict]) -> str:
    """Aligned text table grouped into the four strategy families."""
    header = ["Strategy", "Accuracy", "Macro-F1", "AUC"]
    body: list[list[str] | str] = []
    for group in GROUP_ORDER:
        members = [r for r in rows if r["group"] == group]
        if not members:
            continue
        body.append(group)
        for r in members:
            body.append(
                [
                    "  " + r["strategy"],
                    _cell(r["accuracy_mean"], r["accuracy_std"]),
                    _cell(r["macro_f1_mean"], r["macro_f1_std"]),
                    _cell(r["auc_mean"], r["auc_std"]),
                ]
            )
    cells = [header] + [b for b in body if isinstance(b, list)]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    line = lambda c: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(c, widths)))  # noqa: E731
    out = [line(header), "-" * len(line(header))]
    for b in body:
        out.append(b if isinstance(b, str) else line(b))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- experiments


@dataclass
class FoldOutcome:
    fold: int
    metrics: FoldMetrics
    audit: dict
    logs: dict


def config_hash(spec: StrategySpec, train: TrainConfig, aug: AugmentConfig | None, k: int, seed: int) -> str:
    blob = json.dumps(
        {"spec": spec.to_dict(), "train": asdict(train), "aug": None if aug is None else asdict(aug), "k": k, "seed": seed},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _derived_seed(seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, *salt]).generate_state(1)[0])


def _param_digest(model) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def _backbone_digest(model) -> str:
    h = hashlib.sha256()
    for s in model.streams():
        for name, p in s.backbone.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


def _train_member(model, train, val, train_cfg, ctx, fold_dir: Path | None, tag: str):
    log_path = None if fold_dir is None else fold_dir / f"train_log{tag}.jsonl"
    if log_path is not None and log_path.exists():
        log_path.unlink()
    before = _backbone_digest(model)
    result = train_fold(model, train, val, train_cfg, ctx, log_path)
    frozen_ok = _backbone_digest(model) == before if model.spec.frozen else None
    if fold_dir is not None:
        save_checkpoint(fold_dir / f"checkpoint{tag}.npz", model)
    return result, frozen_ok


def run_fold(
    spec: StrategySpec,
    items: list[Item],
    plan: FoldPlan,
    f: int,
    train_cfg: TrainConfig,
    aug: AugmentConfig | None,
    seed: int,
    store: FeatureStore | None = None,
    out_dir: Path | None = None,
) -> FoldOutcome:
    by_id = {it.item_id: it for it in items}
    test = [by_id[s] for s in plan.test[f]]
    val = [by_id[s] for s in plan.val[f]]
    train = [by_id[s] for s in plan.train(f)]
    fold_spec = StrategySpec.from_dict({**spec.to_dict(), "init_seed": _derived_seed(seed, 1, f)})
    cfg = TrainConfig(**{**asdict(train_cfg), "seed": _derived_seed(seed, 2, f)})
    augmented: list = []
    ctx = RunContext(aug=aug, seed=seed, store=store, audit=augmented)
    fold_dir = None
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold_{f:02d}"
        fold_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(fold_spec)
    logs, frozen_checks = {}, []
    if isinstance(model, DecisionCombination):
        for name, member in model.members.items():
            res, ok = _train_member(member, train, val, cfg, ctx, fold_dir, f"_{name}")
            logs[name] = res.log
            frozen_checks.append(ok)
    else:
        res, ok = _train_member(model, train, val, cfg, ctx, fold_dir, "")
        logs["model"] = res.log
        frozen_checks.append(ok)
    eval_ctx = RunContext(aug=None, seed=seed, store=store)
    test_items = model.expand_items(test)
    pred = model.predict(test_items, eval_ctx)
    labels = np.array([it.label for it in test_items])
    acc, f1 = accuracy_and_macro_f1(pred.y_hat, labels)
    metrics = FoldMetrics(acc, f1, auc_roc(pred.y_hat, labels))
    base_ids = {a.split("/")[0] for a, _, _ in augmented}
    audit = {
        "disjoint": not (set(plan.test[f]) & (set(plan.train(f)) | set(plan.val[f]))),
        "augmented_held_out": sorted(base_ids & (set(plan.test[f]) | set(plan.val[f]))),
        "augmented_events": len(augmented),
        "frozen_backbone_unchanged": None if not spec.frozen else all(frozen_checks),
    }
    if fold_dir is not None:
        (fold_dir / "metrics.json").write_text(
            json.dumps({"fold": f, "metrics": asdict(metrics), "audit": audit}, sort_keys=True, indent=1) + "\n"
        )
    return FoldOutcome(f, metrics, audit, logs)


def _fold_worker(args):
    return run_fold(*args)


def run_strategy(
    spec: StrategySpec,
    items: list[Item],
    plan: FoldPlan,
    train_cfg: TrainConfig,
    aug: AugmentConfig | None,
    seed: int,
    store: FeatureStore | None = None,
    out_dir: Path | None = None,
    jobs: int = 1,
    label: str | None = None,
) -> tuple[MetricsReport, list[FoldOutcome]]:
    """All folds of one strategy; any fold failure yields a failed report."""
    name = label or spec.name
    chash = config_hash(spec, train_cfg, aug, plan.k, seed)
    sdir = None if out_dir is None else Path(out_dir) / name
    args = [(spec, items, plan, f, train_cfg, aug, seed, store, sdir) for f in range(plan.k)]
    try:
        if jobs > 1:
            import multiprocessing as mp
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as ex:
                outcomes = list(ex.map(_fold_worker, args))
        else:
            outcomes = [_fold_worker(a) for a in args]
    except Exception as e:  # noqa: BLE001 - any fold failure aborts only this strategy
        diag = f"{type(e).__name__}: {e}"
        if sdir is not None:
            sdir.mkdir(parents=True, exist_ok=True)
            (sdir / "failure.txt").write_text(traceback.format_exc())
        return failed_report(name, chash, diag), []
    notes = []
    if spec.frozen:
        unchanged = all(o.audit["frozen_backbone_unchanged"] for o in outcomes)
        notes.append("frozen backbone" + ("; parameters unchanged" if unchanged else "; PARAMETERS CHANGED"))
    if not all(o.audit["disjoint"] for o in outcomes):
        notes.append("SPEAKER OVERLAP")
    if any(o.audit["augmented_held_out"] for o in outcomes):
        notes.append("HELD-OUT ITEMS AUGMENTED")
    report = aggregate([o.metrics for o in outcomes], name, chash, "; ".join(notes))
    return report, outcomes


def run_experiment(
    records: list[SubjectRecord],
    specs: list[StrategySpec],
    train_cfg: TrainConfig | None = None,
    aug: AugmentConfig | None = None,
    k: int = 10,
    seed: int = 0,
    out_dir=None,
    jobs: int = 1,
    items: list[Item] | None = None,
    store: FeatureStore | None = None,
    labels: list[str] | None = None,
) -> list[MetricsReport]:
    """Cross-validate every strategy on one shared fold plan and write reports."""
    train_cfg = train_cfg or TrainConfig()
    plan = make_folds(records, k, seed)
    issues = plan.audit()
    if issues:
        raise RuntimeError("fold plan audit failed: " + "; ".join(issues))
    items = items if items is not None else load_items(records)
    store = store if store is not None else FeatureStore()
    reports = []
    labels = labels or [s.name for s in specs]
    for spec, label in zip(specs, labels):
        report, _ = run_strategy(spec, items, plan, train_cfg, aug, seed, store, out_dir, jobs, label)
        reports.append(report)
    if out_dir is not None:
        write_reports(reports, out_dir)
    return reports


def write_reports(reports: list[MetricsReport], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = reports_to_csv(reports)
    (out / "report.csv").write_text(text)
    (out / "report.txt").write_text(render_table(reports_from_csv(text)))
    folds = {r.strategy: [asdict(f) for f in r.per_fold] for r in reports}
    (out / "per_fold.json").write_text(json.dumps(folds, sort_keys=True, indent=1) + "\n")
