"""Batch attack evaluation, ablation sweeps and report files."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import ATTACKS, AttackConfig, AttackRng, Ensemble, run_attack
from .data import Dataset
from .errors import ConfigError, LabelError, ReportError, ShapeError
from .models import load_model
from .tensor import Tensor
from .transforms import SamplePool

CSV_HEADER = ("surrogate", "target", "attack", "n", "success_rate", "is_whitebox")
SWEEP_AXES = ("m2", "eta")


@dataclass(frozen=True)
class RunConfig:
    """One attack experiment.

    ``pool`` is the dataset that other-category images are drawn from; it
    defaults to the whole evaluation dataset. ``limit`` attacks only the
    first ``limit`` images. ``threads`` of None reads ADMIX_THREADS.
    """

    surrogates: tuple
    targets: tuple
    dataset: str
    attack: str = "admix"
    cfg: AttackConfig = field(default_factory=AttackConfig)
    restrict_to_correct: bool = False
    out: str | None = None
    pool: str | None = None
    limit: int | None = None
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "surrogates", tuple(str(p) for p in self.surrogates))
        object.__setattr__(self, "targets", tuple(str(p) for p in self.targets))
        if not self.surrogates:
            raise ConfigError("at least one surrogate checkpoint is required")
        if not self.targets:
            raise ConfigError("at least one target checkpoint is required")
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}; choose from {', '.join(ATTACKS)}")
        if self.limit is not None and self.limit < 0:
            raise ConfigError(f"limit must be >= 0, got {self.limit}")

    @property
    def seed(self) -> int:
        return self.cfg.seed


@dataclass(frozen=True)
class ReportRow:
    surrogate: str
    target: str
    attack: str
    n: int
    successes: int
    is_whitebox: bool

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else 0.0


def worker_count(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("ADMIX_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(f"ADMIX_THREADS must be an integer, got {env!r}") from None
        else:
            threads = os.cpu_count() or 1
    return max(1, int(threads))


@dataclass
class _Loaded:
    surrogate: object
    surrogate_name: str
    targets: list
    data: Dataset
    pool: SamplePool


def _load(run: RunConfig) -> _Loaded:
    # parse every input up front so a bad file fails before any attack runs
    for p in (*run.surrogates, *run.targets, run.dataset, *([run.pool] if run.pool else [])):
        if not Path(p).is_file():
            raise ConfigError(f"no such file: {p}")
    sur_models = [load_model(p) for p in run.surrogates]
    targets = [(p, load_model(p)) for p in run.targets]
    full = Dataset.load(run.dataset)
    data = full if run.limit is None else full.subset(slice(0, run.limit))
    pool_data = Dataset.load(run.pool) if run.pool else full
    surrogate = sur_models[0] if len(sur_models) == 1 else Ensemble(sur_models)
    for m in [*sur_models, *(t for _, t in targets)]:
        if tuple(m.input_shape) != data.image_shape:
            raise ShapeError("evaluate_attack", f"model {m.name} does not accept the dataset images",
                             model=list(m.input_shape), images=list(data.image_shape))
        for labels in (data.labels, pool_data.labels):
            if len(labels) and labels.max() >= m.num_classes:
                raise LabelError(f"label {int(labels.max())} out of range for model {m.name} "
                                 f"with {m.num_classes} classes")
    name = "+".join(Path(p).stem for p in run.surrogates)
    return _Loaded(surrogate, name, targets, data, SamplePool.from_dataset(pool_data))


def craft_adversaries(model, data: Dataset, attack: str, cfg: AttackConfig,
                      pool: SamplePool | None, threads: int = 1) -> np.ndarray:
    """Adversaries for every image, in index order.

    Image i draws its randomness from (cfg.seed, i), so the output does not
    depend on the number of worker threads.
    """
    def one(i: int) -> np.ndarray:
        rng = AttackRng.from_seed(cfg.seed, i)
        res = run_attack(attack, model, Tensor(data.images[i]), int(data.labels[i]), cfg, rng, pool)
        return res.x_adv.data

    if len(data) == 0:
        return np.zeros((0, *data.image_shape), dtype=np.float32)
    if threads <= 1:
        return np.stack([one(i) for i in range(len(data))])
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return np.stack(list(ex.map(one, range(len(data)))))


def attack_label(attack: str, cfg: AttackConfig) -> str:
    name = attack
    if cfg.use_dim and attack != "dim":
        name += "+dim"
    if cfg.use_tim and attack != "tim":
        name += "+tim"
    return name


def _score(loaded: _Loaded, run: RunConfig, adv: np.ndarray, label: str) -> list[ReportRow]:
    y = loaded.data.labels
    sur_paths = {Path(p).resolve() for p in run.surrogates}
    rows = []
    for path, target in loaded.targets:
        keep = np.ones(len(y), dtype=bool)
        if run.restrict_to_correct:
            keep = target.predict(loaded.data.images) == y
        fooled = target.predict(adv) != y if len(adv) else np.zeros(0, dtype=bool)
        rows.append(ReportRow(
            surrogate=loaded.surrogate_name,
            target=Path(path).stem,
            attack=label,
            n=int(keep.sum()),
            successes=int((fooled & keep).sum()),
            is_whitebox=Path(path).resolve() in sur_paths,
        ))
    return rows


def evaluate_attack(run: RunConfig) -> list[ReportRow]:
    """Craft one adversary per image on the surrogate(s), then score it on
    every target: success means the target's argmax differs from the label."""
    loaded = _load(run)
    adv = craft_adversaries(loaded.surrogate, loaded.data, run.attack, run.cfg,
                            loaded.pool, worker_count(run.threads))
    return _score(loaded, run, adv, attack_label(run.attack, run.cfg))


def sweep_ablation(run: RunConfig, axis: str, values) -> list[ReportRow]:
    """One evaluation per axis value with a shared seed; rows are tagged
    ``attack[axis=value]``. Values that switch the mixing off (m2=0 or
    eta=0) are evaluated with the scale-copies attack, which is what the
    admix attack reduces to there; those rows keep the admix tag so the
    sweep reads as one curve."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    plans = []
    for v in values:
        v = int(v) if axis == "m2" else float(v)
        cfg = replace(run.cfg, tcfg=replace(run.cfg.tcfg, **{axis: v}))
        attack = "sim" if v == 0 and run.attack in ("admix", "admix-lm") else run.attack
        plans.append((v, cfg, attack))

    loaded = _load(run)
    threads = worker_count(run.threads)
    rows = []
    for v, cfg, attack in plans:
        adv = craft_adversaries(loaded.surrogate, loaded.data, attack, cfg, loaded.pool, threads)
        tag = f"{attack_label(run.attack, cfg)}[{axis}={v:g}]"
        rows.extend(_score(loaded, run, adv, tag))
    return rows


# ---------------------------------------------------------------------------
# report files


def _row_dict(r: ReportRow) -> dict:
    return {"surrogate": r.surrogate, "target": r.target, "attack": r.attack,
            "n": r.n, "success_rate": f"{r.success_rate:.4f}", "is_whitebox": r.is_whitebox}


def format_report(rows, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            d = _row_dict(r)
            w.writerow([d["surrogate"], d["target"], d["attack"], d["n"], d["success_rate"],
                        "true" if r.is_whitebox else "false"])
        return buf.getvalue()
    if fmt == "json":
        # the rate is spliced in verbatim so it keeps exactly four decimals
        objs = []
        for r in rows:
            d = _row_dict(r)
            parts = [f"{json.dumps(k)}: {d[k] if k == 'success_rate' else json.dumps(d[k])}" for k in CSV_HEADER]
            objs.append("  {" + ", ".join(parts) + "}")
        return "[\n" + ",\n".join(objs) + ("\n" if objs else "") + "]\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def write_report(rows, fmt: str, path) -> None:
    text = format_report(rows, fmt)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write report to {path}: {e.strerror or e}") from e


def write_metadata(path, run: RunConfig, n_images: int, n_classes: int) -> Path:
    """Sidecar ``<report>.meta.json`` describing how the rows were produced."""
    meta = {
        "protocol": {
            "images": n_images,
            "classes": n_classes,
            "note": "desk-scale protocol: success rate is the misclassification rate over "
                    f"{n_images} images spread across {n_classes} classes",
            "restrict_to_correct": run.restrict_to_correct,
        },
        "attack": run.attack,
        "config": {k: v for k, v in asdict(run.cfg).items() if k != "tcfg"},
        "transform": {**asdict(run.cfg.tcfg), "gamma_schedule": list(run.cfg.tcfg.gammas)},
        "surrogates": [Path(p).name for p in run.surrogates],
        "targets": [Path(p).name for p in run.targets],
        "dataset": Path(run.dataset).name,
    }
    side = Path(str(path) + ".meta.json")
    try:
        side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write metadata to {side}: {e.strerror or e}") from e
    return side


def _parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if s in ("true", "false"):
        return s == "true"
    raise ReportError(f"bad boolean {s!r}")


def _row_from(d: dict) -> ReportRow:
    try:
        n = int(d["n"])
        rate = float(d["success_rate"])
        return ReportRow(str(d["surrogate"]), str(d["target"]), str(d["attack"]),
                         n, int(round(rate * n)), _parse_bool(d["is_whitebox"]))
    except (KeyError, ValueError, TypeError) as e:
        raise ReportError(f"malformed report row {d!r}") from e


def parse_report(text: str) -> list[ReportRow]:
    """Rows from CSV or JSON report text.

    Success counts are recovered as round(rate * n), which is exact while
    n < 5000 given four printed decimals.
    """
    if text.lstrip().startswith("["):
        try:
            items = json.loads(text)
        except json.JSONDecodeError as e:
            raise ReportError(f"invalid JSON report: {e}") from e
        return [_row_from(d) for d in items]
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ReportError(f"unexpected CSV header {reader.fieldnames}")
    return [_row_from(d) for d in reader]


def read_report(path) -> list[ReportRow]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot read report {path}: {e.strerror or e}") from e
    return parse_report(text)
