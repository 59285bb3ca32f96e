"""Category-aware evaluation: normalization, taxonomy, aggregation, reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import re
import statistics
from collections import defaultdict
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from replab.errors import ConfigError, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

UNCATEGORIZED = "uncategorized"
ENV_FAMILIES = ("ALE", "DMC", "synthetic")
REWARD_STRUCTURES = ("dense", "dense_plus", "sparse")
BOOTSTRAP_RESAMPLES = 10_000

# game groups of the Atari-100k fixture and the reward structure they map to
GROUP_REWARD = {
    "Human Optimal": "dense_plus",
    "Score Exploit": "dense_plus",
    "Dense Reward": "dense",
    "Sparse Reward": "sparse",
}
# augmentations used by each fixture method on ALE
FIXTURE_METHOD_AUGS = {
    "DER+Aug": ("intensity", "shift"),
    "DrQ": ("intensity", "shift"),
    "SPR": ("intensity", "shift"),
}


# -- scores --------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class EnvSpec:
    name: str
    family: str = "synthetic"
    max_return: Optional[float] = None
    random_score: Optional[float] = None
    human_score: Optional[float] = None


def normalize_score(raw: float, env_spec: EnvSpec) -> float:
    """``raw / max_return`` clipped to [0, 1], or human-normalized for ALE."""
    if env_spec.family == "ALE":
        if env_spec.random_score is None or env_spec.human_score is None:
            raise ValidationError(f"{env_spec.name}: ALE normalization needs random and human reference scores")
        span = env_spec.human_score - env_spec.random_score
        if span == 0:
            raise ZeroDivisionError(f"{env_spec.name}: human and random reference scores are equal")
        return (raw - env_spec.random_score) / span
    if not env_spec.max_return:
        raise ValidationError(f"{env_spec.name}: max_return must be a positive number")
    return float(min(max(raw / env_spec.max_return, 0.0), 1.0))


# -- taxonomy ------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CategoryDescriptor:
    id: str
    env_family: str
    reward_structure: str
    distractors: bool
    augmentations: frozenset

    def matches(self, env_family, reward_structure, distractors, augmentations) -> bool:
        return (
            self.env_family == env_family
            and self.reward_structure == reward_structure
            and self.distractors == bool(distractors)
            and self.augmentations == frozenset(augmentations)
        )


class Taxonomy:
    def __init__(self, categories: Sequence[CategoryDescriptor]):
        ids = [c.id for c in categories]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ConfigError(f"duplicate category ids: {sorted(dupes)}")
        keys = {}
        for c in categories:
            key = (c.env_family, c.reward_structure, c.distractors, c.augmentations)
            if key in keys:
                raise ConfigError(f"categories {keys[key]} and {c.id} match the same data")
            keys[key] = c.id
        self.categories = sorted(categories, key=lambda c: _id_key(c.id))

    def __iter__(self):
        return iter(self.categories)

    def __len__(self):
        return len(self.categories)

    def get(self, category_id):
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(category_id)


def _id_key(cid):
    m = re.match(r"([A-Za-z]*)(\d+)$", cid)
    return (m.group(1), int(m.group(2))) if m else (cid, 0)


def parse_taxonomy(text: str, source="<taxonomy>") -> Taxonomy:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cats = []
    for i, entry in enumerate(data.get("category", [])):
        missing = {"id", "env_family", "reward_structure", "distractors", "augmentations"} - set(entry)
        if missing:
            raise ConfigError(f"{source}: category #{i + 1} is missing {sorted(missing)}")
        if entry["env_family"] not in ENV_FAMILIES:
            raise ConfigError(f"{source}: category {entry['id']} has unknown env_family {entry['env_family']!r}")
        if entry["reward_structure"] not in REWARD_STRUCTURES:
            raise ConfigError(f"{source}: category {entry['id']} has unknown reward_structure {entry['reward_structure']!r}")
        cats.append(
            CategoryDescriptor(
                id=str(entry["id"]),
                env_family=entry["env_family"],
                reward_structure=entry["reward_structure"],
                distractors=bool(entry["distractors"]),
                augmentations=frozenset(entry["augmentations"]),
            )
        )
    return Taxonomy(cats)


def load_taxonomy(path=None) -> Taxonomy:
    """Load a taxonomy file; ``None`` gives the built-in ALE/DMC table."""
    if path is None:
        return parse_taxonomy(resources.files("replab.data").joinpath("taxonomy.toml").read_text(), "taxonomy.toml")
    if str(path) == "desk":
        return parse_taxonomy(resources.files("replab.data").joinpath("taxonomy_desk.toml").read_text(), "taxonomy_desk.toml")
    path = Path(path)
    return parse_taxonomy(path.read_text(), str(path))


def classify(env_family, reward_structure, distractors, augmentations, taxonomy: Taxonomy):
    """Matching category, or the string ``UNCATEGORIZED``."""
    hits = [c for c in taxonomy if c.matches(env_family, reward_structure, distractors, augmentations)]
    return hits[0] if hits else UNCATEGORIZED


# -- run records ---------------------------------------------------------------


@dataclasses.dataclass
class RunRecord:
    run_id: str
    method: str
    env: str
    seed: int
    step: int
    episode_return: float
    normalized_score: Optional[float] = None
    losses: Dict[str, float] = dataclasses.field(default_factory=dict)
    timestamp: float = 0.0
    config_hash: str = ""
    env_family: str = "synthetic"
    reward_structure: str = "dense"
    distractors: bool = False
    augmentations: List[str] = dataclasses.field(default_factory=list)
    preset: str = ""
    score_text: Optional[str] = None

    def __post_init__(self):
        values = [self.episode_return] + list(self.losses.values())
        if self.normalized_score is not None:
            values.append(self.normalized_score)
        if not all(math.isfinite(v) for v in values):
            raise ValidationError(f"run record {self.run_id} has non-finite fields")

    def category(self, taxonomy):
        return classify(self.env_family, self.reward_structure, self.distractors, self.augmentations, taxonomy)

    @property
    def value(self):
        return self.episode_return if self.normalized_score is None else self.normalized_score

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        if d["score_text"] is None:
            del d["score_text"]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def write_records(records, path, append=True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> List[RunRecord]:
    """Read one JSONL file, or every ``*.jsonl`` under a directory."""
    path = Path(path)
    files = sorted(path.rglob("*.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        for line in f.read_text().splitlines():
            if line.strip():
                out.append(RunRecord.from_dict(json.loads(line)))
    return out


def final_records(records):
    """Last logged record per run."""
    last = {}
    for r in records:
        if r.run_id not in last or r.step >= last[r.run_id].step:
            last[r.run_id] = r
    return [last[k] for k in sorted(last)]


# -- aggregation ---------------------------------------------------------------


@dataclasses.dataclass
class GroupStats:
    n_runs: int
    mean: float
    median: float
    std_err: float
    ci_low: float
    ci_high: float
    bootstrap_seed: int


def std_err(values):
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def bootstrap_ci(values, seed=0, resamples=BOOTSTRAP_RESAMPLES, level=0.95):
    """Percentile bootstrap CI of the mean."""
    values = np.sort(np.asarray(values, dtype=float))
    if len(values) == 1:
        return float(values[0]), float(values[0])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(resamples, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [100 * (1 - level) / 2, 100 * (1 + level) / 2])
    return float(lo), float(hi)


def summarize(values, seed=0) -> GroupStats:
    values = sorted(float(v) for v in values)
    lo, hi = bootstrap_ci(values, seed)
    return GroupStats(
        n_runs=len(values),
        mean=float(np.mean(values)),
        median=float(statistics.median(values)),
        std_err=std_err(values),
        ci_low=lo,
        ci_high=hi,
        bootstrap_seed=seed,
    )


@dataclasses.dataclass
class AggregateReport:
    groups: Dict[tuple, GroupStats]
    group_by: tuple
    warnings: List[str] = dataclasses.field(default_factory=list)


def group_key(record, field, taxonomy=None):
    if field == "category":
        cat = record.category(taxonomy) if taxonomy is not None else UNCATEGORIZED
        return cat if isinstance(cat, str) else cat.id
    return getattr(record, field)


def aggregate(records, group_by=("method", "env"), taxonomy=None, seed=0, value=None) -> AggregateReport:
    """Group records and summarize ``value(record)`` (default ``record.value``)."""
    value = value or (lambda r: r.value)
    buckets = defaultdict(list)
    for r in records:
        buckets[tuple(group_key(r, f, taxonomy) for f in group_by)].append(value(r))
    groups = {}
    warnings = []
    for key in sorted(buckets, key=lambda k: tuple(str(x) for x in k)):
        vals = buckets[key]
        if not vals:
            warnings.append(f"empty group {key} excluded")
            log.warning("empty group %s excluded", key)
            continue
        groups[key] = summarize(vals, seed)
    return AggregateReport(groups, tuple(group_by), warnings)


# -- fixtures ------------------------------------------------------------------


def fixture_path(name="atari100k_table5.csv"):
    return resources.files("replab.data").joinpath(name)


def _read_groups(path):
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["game", "group"]:
            raise ValidationError(f"{path}: expected header game,group")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[1] not in GROUP_REWARD:
                raise ValidationError(f"{path}:{lineno}: malformed group row {row!r}")
            groups[row[0]] = row[1]
    return groups


def ingest_fixture(path=None, groups_path=None) -> List[RunRecord]:
    """Read a ``game,method,score`` CSV into ALE run records.

    The sidecar (default ``<stem>.groups.csv``) assigns each game a group.
    Unknown games are kept but flagged uncategorized.
    """
    path = Path(path) if path is not None else Path(str(fixture_path()))
    if groups_path is None:
        groups_path = path.with_name(path.stem + ".groups.csv")
    groups = _read_groups(groups_path) if Path(groups_path).exists() else {}
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["game", "method", "score"]:
            raise ValidationError(f"{path}:1: expected header game,method,score")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            game, method, text = row
            try:
                score = float(text)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: score {text!r} is not a number") from None
            if not math.isfinite(score):
                raise ValidationError(f"{path}:{lineno}: score is not finite")
            group = groups.get(game)
            if group is None:
                log.warning("%s:%d: game %r has no group; it will be uncategorized", path, lineno, game)
            records.append(
                RunRecord(
                    run_id=f"fixture/{method}/{game}",
                    method=method,
                    env=game,
                    seed=0,
                    step=100_000,
                    episode_return=score,
                    env_family="ALE",
                    reward_structure=GROUP_REWARD.get(group, "unknown"),
                    augmentations=list(FIXTURE_METHOD_AUGS.get(method, ())),
                    preset="fixture",
                    score_text=text,
                )
            )
    return records


def write_fixture(records, path=None):
    """Serialize fixture records back to ``game,method,score`` CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["game", "method", "score"])
    for r in records:
        writer.writerow([r.env, r.method, r.score_text if r.score_text is not None else repr(r.episode_return)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def fixture_groups(path=None):
    path = Path(path) if path is not None else Path(str(fixture_path("atari100k_table5.groups.csv")))
    return _read_groups(path)


def group_mean(records, method, games):
    games = set(games)
    vals = [r.episode_return for r in records if r.method == method and r.env in games]
    if not vals:
        raise ValidationError(f"no scores for {method} on the requested games")
    return float(np.mean(vals))


# -- reports -------------------------------------------------------------------

REPORT_COLUMNS = ["method", "category", "n_runs", "mean", "median", "std_err", "ci_low", "ci_high"]


def _fmt(x):
    return f"{x:.6g}"


def report_rows(records, taxonomy, seed=0):
    finals = final_records(records)
    families = {r.env_family for r in finals}
    cats = [c.id for c in taxonomy if c.env_family in families]
    agg = aggregate(finals, ("method", "category"), taxonomy, seed).groups
    methods = sorted({r.method for r in finals})
    rows = []
    for m in methods:
        for cid in cats:
            stats = agg.get((m, cid))
            if stats is None:
                rows.append([m, cid] + [""] * 6)
            else:
                rows.append(
                    [m, cid, str(stats.n_runs)]
                    + [_fmt(v) for v in (stats.mean, stats.median, stats.std_err, stats.ci_low, stats.ci_high)]
                )
    return rows


def report_by_category(records, taxonomy, format="csv", seed=0) -> str:
    """Per (method, category) statistics of final scores.

    Methods without runs in a category get blank cells (``-`` in markdown).
    """
    rows = report_rows(records, taxonomy, seed)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if format in ("md", "markdown"):
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
        for row in rows:
            lines.append("| " + " | ".join(c if c else "-" for c in row) + " |")
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown report format {format!r}")


def parse_report(text, format="csv"):
    """Inverse of :func:`report_by_category`: list of row dicts, blanks as None."""
    if format == "csv":
        reader = csv.DictReader(io.StringIO(text))
        return [{k: (v if v != "" else None) for k, v in row.items()} for row in reader]
    lines = [l for l in text.splitlines() if l.startswith("|")]
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    out = []
    for line in lines[2:]:
        cells = [c.strip() for c in line.strip("|").split("|")]
        out.append({k: (v if v != "-" else None) for k, v in zip(header, cells)})
    return out


# -- plots ---------------------------------------------------------------------


def _slug(text):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(text)).strip("_") or "x"


def learning_curve(records, method, env):
    """Mean and std err over seeds at each logged step."""
    by_step = defaultdict(list)
    for r in records:
        if r.method == method and r.env == env:
            by_step[r.step].append(r.value)
    steps = sorted(by_step)
    return {
        "steps": steps,
        "mean": [float(np.mean(by_step[s])) for s in steps],
        "std_err": [std_err(by_step[s]) for s in steps],
        "n": [len(by_step[s]) for s in steps],
    }


def emit_plots(records, out_path, taxonomy=None, formats=("png", "svg")) -> List[Path]:
    """Bar chart per category and learning curve per (method, env).

    Each figure gets a JSON sidecar with the plotted numbers.  Output is
    deterministic for identical input (no timestamps embedded).
    """
    records = list(records)
    if not records:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    meta = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}}

    def save(fig, stem, data):
        for fmt in formats:
            with matplotlib.rc_context({"svg.hashsalt": "replab"}):
                p = out / f"{stem}.{fmt}"
                fig.savefig(p, format=fmt, metadata=meta.get(fmt))
                written.append(p)
        p = out / f"{stem}.json"
        p.write_text(json.dumps(data, indent=1, sort_keys=True))
        written.append(p)
        plt.close(fig)

    for method, env in sorted({(r.method, r.env) for r in records}):
        curve = learning_curve(records, method, env)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        m = np.array(curve["mean"])
        e = np.array(curve["std_err"])
        ax.plot(curve["steps"], m, label=method)
        ax.fill_between(curve["steps"], m - e, m + e, alpha=0.3)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("score")
        ax.set_title(f"{method} on {env}")
        save(fig, f"curve_{_slug(method)}__{_slug(env)}", curve)

    taxonomy = taxonomy or load_taxonomy()
    finals = final_records(records)
    agg = aggregate(finals, ("category", "method"), taxonomy).groups
    for cid in sorted({k[0] for k in agg}, key=_id_key):
        methods = sorted(k[1] for k in agg if k[0] == cid)
        stats = [agg[(cid, m)] for m in methods]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(range(len(methods)), [s.mean for s in stats], yerr=[s.std_err for s in stats], capsize=3)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=30, ha="right")
        ax.set_title(f"category {cid}")
        fig.tight_layout()
        save(fig, f"bars_{_slug(cid)}", {m: dataclasses.asdict(s) for m, s in zip(methods, stats)})
    return written
