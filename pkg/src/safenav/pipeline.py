"""Seed-sweep experiment pipeline: train, screen, evaluate, verify, report.

Stages mirror the deployment protocol: (1) train one policy per seed and
method on the designated training tube, (2) keep the top policies by
trailing success rate (ties broken by lower episodic cost, then seed),
(3) evaluate the survivors on every tube, (4) verify them against the
safety properties, and emit a selection report with per-property SAT
counts, the completely-safe list, and a distance matrix.

Every job writes its own files atomically under the run directory, so an
interrupted run resumes by skipping artifacts that already exist and a
crash in one seed never corrupts another.  Reports are byte-stable for a
given manifest: no timestamps, sorted keys, deterministic float text.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import resolve_tube
from .ioutil import atomic_write_text, read_json, write_json
from .network import load_network, save_network
from .simulator import EnvConfig
from .training import TrainConfig, TrainRecord, evaluate_policy, train_policy
from .verification import (VerificationResult, VerifierConfig,
                           builtin_properties, find_contrast_pair,
                           greedy_action, verify_all)

METHODS = ("ppo", "lppo")
DEFAULT_EVAL_TUBES = ("tube0", "tube1", "tube2", "tube3")


def _eval_seed(policy_seed: int, tube_index: int) -> int:
    # stable per (policy, tube) evaluation seed; episodes offset from it
    return 1_000_003 * int(policy_seed) + 10_007 * tube_index + 777


@dataclass
class RunManifest:
    run_id: str
    out_dir: str
    seeds: list
    methods: list = field(default_factory=lambda: list(METHODS))
    train_tube: str = "tube3"
    eval_tubes: list = field(default_factory=lambda: list(DEFAULT_EVAL_TUBES))
    top_m: int = 10
    eval_episodes: int = 20
    train: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    verifier: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("manifest seeds must be distinct")
        if not self.seeds:
            raise ValueError("manifest needs at least one seed")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}, expected one of {METHODS}")
        if self.train_tube not in self.eval_tubes:
            raise ValueError(
                f"training tube {self.train_tube!r} must appear in eval_tubes")
        # fail fast on bad overrides
        self.train_config()
        self.env_config()
        self.verifier_config()

    def train_config(self, method: str = "ppo") -> TrainConfig:
        doc = dict(self.train)
        doc["method"] = method
        return TrainConfig.from_dict(doc)

    def env_config(self) -> EnvConfig:
        return EnvConfig.from_dict(dict(self.env))

    def verifier_config(self) -> VerifierConfig:
        return VerifierConfig.from_dict(dict(self.verifier))

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id, "out_dir": self.out_dir,
            "seeds": list(self.seeds), "methods": list(self.methods),
            "train_tube": self.train_tube, "eval_tubes": list(self.eval_tubes),
            "top_m": self.top_m, "eval_episodes": self.eval_episodes,
            "train": dict(self.train), "env": dict(self.env),
            "verifier": dict(self.verifier),
        }

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<dict>") -> "RunManifest":
        for key in ("run_id", "out_dir", "seeds"):
            if key not in doc:
                raise ValueError(f"{source}: manifest missing field '{key}'")
        known = {"run_id", "out_dir", "seeds", "methods", "train_tube",
                 "eval_tubes", "top_m", "eval_episodes", "train", "env",
                 "verifier"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"{source}: unknown manifest fields {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            doc = read_json(path)
        except FileNotFoundError:
            raise FileNotFoundError(f"manifest file not found: {path}")
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON: {e}")
        return cls.from_dict(doc, source=str(path))

    def save(self, path):
        write_json(path, self.to_dict())

    # artifact layout -----------------------------------------------------------

    @property
    def run_dir(self) -> str:
        return os.path.join(self.out_dir, self.run_id)

    def net_path(self, method, seed) -> str:
        return os.path.join(self.run_dir, "nets", f"{method}_seed{seed}.json")

    def record_path(self, method, seed) -> str:
        return os.path.join(self.run_dir, "records", f"{method}_seed{seed}.csv")

    def failed_path(self, method, seed) -> str:
        return os.path.join(self.run_dir, "records",
                            f"{method}_seed{seed}.failed.json")

    def verification_path(self, method, seed) -> str:
        return os.path.join(self.run_dir, "verification",
                            f"{method}_seed{seed}.json")

    @property
    def report_dir(self) -> str:
        return os.path.join(self.run_dir, "report")


@dataclass
class PolicyRecord:
    method: str
    seed: int
    net_path: str = ""
    success_rate: float = 0.0
    mean_cost: float = 0.0
    failed: str | None = None
    distances: dict = field(default_factory=dict)
    eval_success: dict = field(default_factory=dict)
    eval_errors: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    safe: bool | None = None

    @property
    def unresolved(self) -> bool:
        return any(v == "UNKNOWN" for v in self.verdicts.values())


def _train_one(manifest_doc: dict, method: str, seed: int) -> dict:
    """Worker-safe single training job; writes its own artifacts."""
    manifest = RunManifest.from_dict(manifest_doc)
    tube = resolve_tube(manifest.train_tube)
    config = manifest.train_config(method)
    policy, record = train_policy(tube, config, seed,
                                  env_config=manifest.env_config())
    if record.failure is not None:
        raise RuntimeError(f"training aborted: {record.failure}")
    save_network(policy, manifest.net_path(method, seed))
    record.to_csv(manifest.record_path(method, seed))
    return {"success_rate": record.trailing_success_rate(),
            "mean_cost": record.trailing_mean_cost()}


def run_training(manifest: RunManifest, jobs: int = 1,
                 log=None) -> list[PolicyRecord]:
    """One policy per (method, seed); skips seeds whose artifacts exist."""
    pending = []
    records = []
    for method in manifest.methods:
        for seed in sorted(manifest.seeds):
            rec = PolicyRecord(method, seed, manifest.net_path(method, seed))
            records.append(rec)
            if os.path.exists(rec.net_path) and \
                    os.path.exists(manifest.record_path(method, seed)):
                continue
            if os.path.exists(manifest.failed_path(method, seed)):
                rec.failed = read_json(manifest.failed_path(method, seed))["error"]
                continue
            pending.append(rec)

    manifest_doc = manifest.to_dict()

    def handle_failure(rec, err):
        rec.failed = err
        write_json(manifest.failed_path(rec.method, rec.seed),
                   {"method": rec.method, "seed": rec.seed, "error": err})

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_train_one, manifest_doc, r.method, r.seed): r
                       for r in pending}
            for fut, rec in futures.items():
                try:
                    fut.result()
                except Exception as e:       # noqa: BLE001 - isolate per-seed faults
                    handle_failure(rec, f"{type(e).__name__}: {e}")
    else:
        for rec in pending:
            if log:
                log(f"training {rec.method} seed {rec.seed}")
            try:
                _train_one(manifest_doc, rec.method, rec.seed)
            except Exception as e:           # noqa: BLE001
                handle_failure(rec, f"{type(e).__name__}: {e}")

    # load summaries from the artifacts (covers both fresh and resumed seeds)
    for rec in records:
        if rec.failed is not None:
            continue
        try:
            tr = TrainRecord.from_csv(manifest.record_path(rec.method, rec.seed))
            rec.success_rate = tr.trailing_success_rate()
            rec.mean_cost = tr.trailing_mean_cost()
        except Exception as e:               # noqa: BLE001
            rec.failed = f"unreadable record: {e}"
    return records


def screen_policies(records: list[PolicyRecord], top_m: int) -> list[PolicyRecord]:
    """Sort by success desc, then lower cost, then seed; take the top m."""
    ok = [r for r in records if r.failed is None]
    ranked = sorted(ok, key=lambda r: (-r.success_rate, r.mean_cost, r.seed))
    return ranked[:top_m]


def run_evaluation(manifest: RunManifest, screened: list[PolicyRecord],
                   log=None):
    """Greedy rollouts of every screened policy on every eval tube."""
    tubes = {tid: resolve_tube(tid) for tid in manifest.eval_tubes}
    env_cfg = manifest.env_config()
    for rec in screened:
        try:
            net = load_network(rec.net_path)
        except Exception as e:               # noqa: BLE001
            rec.eval_errors["*"] = f"{type(e).__name__}: {e}"
            continue
        for t_idx, tid in enumerate(manifest.eval_tubes):
            if log:
                log(f"evaluating {rec.method} seed {rec.seed} on {tid}")
            try:
                res = evaluate_policy(net, tubes[tid], manifest.eval_episodes,
                                      env_config=env_cfg,
                                      seed_base=_eval_seed(rec.seed, t_idx))
                rec.distances[tid] = res["mean_distance_traveled"]
                rec.eval_success[tid] = res["success_rate"]
            except Exception as e:           # noqa: BLE001
                rec.eval_errors[tid] = f"{type(e).__name__}: {e}"


def _verify_one(manifest_doc: dict, method: str, seed: int) -> dict:
    manifest = RunManifest.from_dict(manifest_doc)
    net = load_network(manifest.net_path(method, seed))
    summary = verify_all(net, builtin_properties(), manifest.verifier_config())
    doc = summary.to_dict()
    write_json(manifest.verification_path(method, seed), doc)
    return doc


def run_verification(manifest: RunManifest, screened: list[PolicyRecord],
                     jobs: int = 1, log=None):
    """Verify every screened policy against the four builtin properties."""
    pending = []
    for rec in screened:
        path = manifest.verification_path(rec.method, rec.seed)
        if os.path.exists(path):
            doc = read_json(path)
            rec.verdicts = {k: v["verdict"] for k, v in doc["results"].items()}
            rec.safe = doc["safe"]
        else:
            pending.append(rec)
    manifest_doc = manifest.to_dict()

    def apply(rec, doc):
        rec.verdicts = {k: v["verdict"] for k, v in doc["results"].items()}
        rec.safe = doc["safe"]

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_verify_one, manifest_doc, r.method, r.seed): r
                       for r in pending}
            for fut, rec in futures.items():
                try:
                    apply(rec, fut.result())
                except Exception as e:       # noqa: BLE001
                    rec.failed = f"verification: {type(e).__name__}: {e}"
    else:
        for rec in pending:
            if log:
                log(f"verifying {rec.method} seed {rec.seed}")
            try:
                apply(rec, _verify_one(manifest_doc, rec.method, rec.seed))
            except Exception as e:           # noqa: BLE001
                rec.failed = f"verification: {type(e).__name__}: {e}"


def _load_witness(manifest, rec, prop_name):
    doc = read_json(manifest.verification_path(rec.method, rec.seed))
    res = VerificationResult.from_dict(doc["results"][prop_name])
    return res.witness


def _contrast_demo(manifest: RunManifest, screened: list[PolicyRecord]):
    """First SAT policy (method, seed, property order) with a single-cell
    perturbation that flips the outcome; both points replayed concretely."""
    props = {p.name: p for p in builtin_properties()}
    for rec in sorted(screened, key=lambda r: (r.method, r.seed)):
        for name in sorted(props):
            if rec.verdicts.get(name) != "SAT":
                continue
            witness = _load_witness(manifest, rec, name)
            if witness is None:
                continue
            net = load_network(rec.net_path)
            found = find_contrast_pair(net, props[name], witness)
            if found is None:
                continue
            perturbed, cell, delta, base = found
            return {
                "method": rec.method, "seed": rec.seed, "property": name,
                "witness": [float(v) for v in base],
                "witness_action": greedy_action(net.forward(base)),
                "perturbed": [float(v) for v in perturbed],
                "perturbed_action": greedy_action(net.forward(perturbed)),
                "cell": cell, "delta": delta,
                "forbidden_action": props[name].forbidden_action,
            }
    return None


def build_report(manifest: RunManifest, all_records: list[PolicyRecord],
                 screened: list[PolicyRecord]) -> dict:
    prop_names = [p.name for p in builtin_properties()]
    by_method = {m: [r for r in screened if r.method == m]
                 for m in manifest.methods}
    sat_counts, unknown_counts, safe_models, classification = {}, {}, {}, {}
    dist_matrix = {}
    per_policy = {}
    for m, recs in by_method.items():
        sat_counts[m] = {p: sum(1 for r in recs if r.verdicts.get(p) == "SAT")
                         for p in prop_names}
        unknown_counts[m] = {p: sum(1 for r in recs
                                    if r.verdicts.get(p) == "UNKNOWN")
                             for p in prop_names}
        safe_models[m] = sorted(r.seed for r in recs if r.safe)
        classification[m] = {
            "safe": sorted(r.seed for r in recs if r.safe),
            "unsafe": sorted(r.seed for r in recs
                             if r.safe is False and not r.unresolved),
            "unresolved": sorted(r.seed for r in recs
                                 if r.safe is False and r.unresolved),
        }
        dist_matrix[m] = {}
        for tid in manifest.eval_tubes:
            vals = [r.distances[tid] for r in recs if tid in r.distances]
            dist_matrix[m][tid] = float(np.mean(vals)) if vals else None
        per_policy[m] = {}
        for r in sorted(recs, key=lambda r: r.seed):
            per_policy[m][str(r.seed)] = {
                "success_rate": float(r.success_rate),
                "mean_cost": float(r.mean_cost),
                "distances": {k: float(v) for k, v in sorted(r.distances.items())},
                "eval_success": {k: float(v)
                                 for k, v in sorted(r.eval_success.items())},
                "verdicts": dict(sorted(r.verdicts.items())),
            }

    failed = sorted(({"method": r.method, "seed": r.seed, "error": r.failed}
                     for r in all_records if r.failed is not None),
                    key=lambda d: (d["method"], d["seed"]))
    report = {
        "run_id": manifest.run_id,
        "methods": list(manifest.methods),
        "seeds": list(manifest.seeds),
        "train_tube": manifest.train_tube,
        "eval_tubes": list(manifest.eval_tubes),
        "top_m": manifest.top_m,
        "screened": {m: sorted(r.seed for r in by_method[m])
                     for m in manifest.methods},
        "sat_counts": sat_counts,
        "sat_total": {m: int(sum(sat_counts[m].values()))
                      for m in manifest.methods},
        "unknown_counts": unknown_counts,
        "safe_models": safe_models,
        "safe_counts": {m: len(safe_models[m]) for m in manifest.methods},
        "classification": classification,
        "distance_matrix": dist_matrix,
        "per_policy": per_policy,
        "failed_jobs": failed,
        "cost_threshold": manifest.train_config().cost_threshold,
        "contrast_demo": _contrast_demo(manifest, screened),
    }
    return report


def _format_report_text(report: dict) -> str:
    prop_names = [p.name for p in builtin_properties()]
    lines = [f"model selection report: run {report['run_id']}", ""]
    header = f"{'method':8s}" + "".join(f"{p:>12s}" for p in prop_names) \
        + f"{'safe':>8s}"
    lines.append("SAT counts per safety property (screened policies)")
    lines.append(header)
    for m in report["methods"]:
        row = f"{m:8s}" + "".join(f"{report['sat_counts'][m][p]:12d}"
                                  for p in prop_names)
        row += f"{report['safe_counts'][m]:8d}"
        lines.append(row)
    lines.append("")
    lines.append("mean distance traveled (screened policies)")
    lines.append(f"{'method':8s}" + "".join(f"{t:>10s}"
                                            for t in report["eval_tubes"]))
    for m in report["methods"]:
        cells = []
        for t in report["eval_tubes"]:
            v = report["distance_matrix"][m][t]
            cells.append(f"{v:10.3f}" if v is not None else f"{'--':>10s}")
        lines.append(f"{m:8s}" + "".join(cells))
    lines.append("")
    for m in report["methods"]:
        lines.append(f"completely safe {m} models: "
                     + (", ".join(str(s) for s in report['safe_models'][m])
                        or "none"))
    if report["failed_jobs"]:
        lines.append("")
        lines.append(f"failed jobs: {len(report['failed_jobs'])}")
        for f in report["failed_jobs"]:
            lines.append(f"  {f['method']} seed {f['seed']}: {f['error']}")
    demo = report.get("contrast_demo")
    if demo:
        lines.append("")
        lines.append(
            f"adversarial sensitivity: {demo['method']} seed {demo['seed']} on "
            f"{demo['property']}: cell {demo['cell']} changed by "
            f"{demo['delta']:+.3f} flips action "
            f"{demo['witness_action']} -> {demo['perturbed_action']}")
    return "\n".join(lines) + "\n"


def _emit_curves(manifest: RunManifest, out_dir: str):
    """Per-method learning curves averaged over seeds, plus the threshold."""
    threshold = manifest.train_config().cost_threshold
    for method in manifest.methods:
        per_seed = []
        for seed in sorted(manifest.seeds):
            path = manifest.record_path(method, seed)
            if os.path.exists(path):
                per_seed.append(TrainRecord.from_csv(path))
        if not per_seed:
            continue
        n = min(r.n_episodes for r in per_seed)
        rets = np.mean([r.returns[:n] for r in per_seed], axis=0)
        costs = np.mean([r.costs[:n] for r in per_seed], axis=0)
        rows = ["episode,mean_return,mean_cost,cost_threshold"]
        for i in range(n):
            rows.append(f"{i},{float(rets[i])!r},{float(costs[i])!r},"
                        f"{float(threshold)!r}")
        atomic_write_text(os.path.join(out_dir, f"curves_{method}.csv"),
                          "\n".join(rows) + "\n")


def _emit_distances(manifest: RunManifest, screened, out_dir: str):
    rows = ["method,seed,tube,mean_distance,eval_success_rate"]
    for rec in sorted(screened, key=lambda r: (r.method, r.seed)):
        for tid in manifest.eval_tubes:
            d = rec.distances.get(tid)
            s = rec.eval_success.get(tid)
            rows.append(f"{rec.method},{rec.seed},{tid},"
                        f"{'' if d is None else repr(float(d))},"
                        f"{'' if s is None else repr(float(s))}")
    atomic_write_text(os.path.join(out_dir, "distances.csv"),
                      "\n".join(rows) + "\n")


def emit_report(manifest: RunManifest, report: dict, screened):
    out = manifest.report_dir
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "report.json"), report)
    atomic_write_text(os.path.join(out, "report.txt"),
                      _format_report_text(report))
    _emit_curves(manifest, out)
    _emit_distances(manifest, screened, out)


def run_select(manifest: RunManifest, jobs: int = 1, log=None) -> tuple[dict, int]:
    """The full pipeline; returns (report, number of failed jobs)."""
    os.makedirs(manifest.run_dir, exist_ok=True)
    manifest.save(os.path.join(manifest.run_dir, "manifest.json"))
    records = run_training(manifest, jobs=jobs, log=log)
    screened = []
    for m in manifest.methods:      # screening is applied per method
        m_records = [r for r in records if r.method == m]
        chosen = screen_policies(m_records, manifest.top_m)
        if len(chosen) < manifest.top_m and log:
            log(f"warning: only {len(chosen)} trained {m} policies available "
                f"for top_m={manifest.top_m}")
        screened.extend(chosen)
    run_evaluation(manifest, screened, log=log)
    run_verification(manifest, screened, jobs=jobs, log=log)
    report = build_report(manifest, records, screened)
    emit_report(manifest, report, screened)
    n_failed = len(report["failed_jobs"])
    return report, n_failed
