"""GP-MIA pipeline stages: train target -> extract -> train GP -> infer -> eval.

Each stage reads its inputs from, and writes its artifact to, the output
directory. Every artifact records the config fingerprint. A stage refuses
upstream artifacts with a different fingerprint unless ``force`` is set.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gpmia import __version__, config as cfgmod, datagen, evalkit, features, gpc, nnet
from gpmia.errors import ConfigError, FingerprintMismatch, MissingModel, SingleClass

log = logging.getLogger(__name__)

MODEL_FILE = "model.json"
FEATURES_FILE = "features.jsonl"
CANDIDATES_FILE = "candidates.jsonl"
POSTERIOR_FILE = "posterior.json"
SCORES_FILE = "scores.jsonl"
REPORT_FILE = "report.json"
MANIFEST_FILE = "manifest.json"


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit sub-seed for a named random stream."""
    ents = [int(seed) & 0xFFFFFFFF]
    for n in names:
        ents.append(zlib.crc32(str(n).encode("utf-8")))
    return int(np.random.SeedSequence(ents).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass
class Run:
    cfg: dict
    out: Path
    force: bool = False

    def __post_init__(self):
        self.out = Path(self.out)
        self.fingerprint = features.config_fingerprint(cfgmod.fingerprint_view(self.cfg))
        self._member = None

    @property
    def seed(self):
        return self.cfg["seed"]

    def path(self, name):
        return self.out / name

    # -- data ------------------------------------------------------------
    def member_data(self):
        if self._member is None:
            self._member = self.resolve_source(self.cfg["data"]["member"], "data.member").with_provenance("member")
        return self._member

    def resolve_source(self, src, where):
        if src == "member":
            return self.member_data()
        if "synthetic" in src:
            params = dict(src["synthetic"] or {})
            stream = params.pop("seed", where)
            if "class_weights" in params:
                params["class_weights"] = tuple(params["class_weights"])
            ds = datagen.generate(datagen.SynthConfig(seed=derive_seed(self.seed, "synthetic", stream), **params))
        elif "csv" in src:
            path = Path(src["csv"])
            if not path.exists():
                raise ConfigError(f"{where}: dataset file not found: {path}")
            ds = datagen.read_csv(path, label_column=src.get("label_column"))
        else:
            ds = datagen.concat([self.resolve_source(s, f"{where}.concat[{i}]")
                                 for i, s in enumerate(src["concat"])])
        if src.get("balance"):
            ds = balance_classes(ds, derive_seed(self.seed, "balance"))
        if src.get("split"):
            sp = src["split"]
            parts = datagen.split(ds, sp["fractions"], derive_seed(self.seed, "split", sp.get("seed", 0)))
            ds = parts[int(sp.get("part", 0))]
        if src.get("subset"):
            rng = np.random.default_rng(derive_seed(self.seed, "subset", where))
            n = int(src["subset"])
            if n > len(ds):
                raise ConfigError(f"{where}: subset {n} larger than the source ({len(ds)})")
            ds = ds.subset(np.sort(rng.choice(len(ds), n, replace=False)))
        return ds

    def group_units(self, group):
        ds = self.resolve_source(group["source"], f"group {group['name']}")
        u = self.cfg["units"]
        return datagen.make_units(ds, u["size"], group["units"], derive_seed(self.seed, "units", group["name"]),
                                  stratified=u["stratified"], disjoint=u["disjoint"], prefix=group["name"])

    # -- configs -----------------------------------------------------------
    def train_config(self):
        t = self.cfg["target"]["train"]
        return nnet.TrainConfig(t["epochs"], t["batch_size"], t["learning_rate"], t["optimizer"],
                                derive_seed(self.seed, "target_train"))

    def feature_config(self):
        f = self.cfg["features"]
        lr = f["finetune_lr"]
        if lr is None:
            lr = 0.1 * self.cfg["target"]["train"]["learning_rate"]
        return features.FeatureConfig(tuple(f["families"]), f["finetune_epochs"], lr, f["ntk_lambda"],
                                      f["ntk_ref_size"])

    # -- manifest ----------------------------------------------------------
    def record(self, stage, artifact):
        mpath = self.path(MANIFEST_FILE)
        doc = {}
        if mpath.exists():
            try:
                doc = json.loads(mpath.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                doc = {}
        if doc.get("fingerprint") != self.fingerprint:
            doc = {"fingerprint": self.fingerprint, "tool_version": __version__, "artifacts": {}, "stages": {}}
        doc["artifacts"][stage] = artifact
        doc["stages"][stage] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        mpath.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def check_fingerprint(self, found, what):
        if found != self.fingerprint and not self.force:
            raise FingerprintMismatch(
                f"{what} was produced with config fingerprint {found!r}, current config is "
                f"{self.fingerprint!r}; re-run the upstream stage or pass --force")

    def is_current(self, name):
        """True if artifact ``name`` exists and carries this run's fingerprint."""
        p = self.path(name)
        if not p.exists():
            return False
        try:
            if name.endswith(".jsonl"):
                with open(p, encoding="utf-8") as fh:
                    first = fh.readline()
                return bool(first) and json.loads(first).get("fingerprint") == self.fingerprint
            return json.loads(p.read_text(encoding="utf-8")).get("fingerprint") == self.fingerprint
        except (json.JSONDecodeError, OSError):
            return False


def balance_classes(ds, seed):
    """Keep every minority-class sample and an equal random draw of the majority."""
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(ds.labels, return_counts=True)
    if len(classes) != 2:
        raise SingleClass("balancing needs exactly two classes")
    k = int(counts.min())
    keep = np.concatenate([
        np.flatnonzero(ds.labels == c) if n == k else rng.choice(np.flatnonzero(ds.labels == c), k, replace=False)
        for c, n in zip(classes, counts)
    ])
    return ds.subset(np.sort(keep))


def _threads():
    env = os.environ.get("GPMIA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"GPMIA_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def extract_units(model, units, fcfg, ctx):
    threads = min(_threads(), len(units))
    if threads <= 1:
        return [features.extract(model, u, fcfg, ctx) for u in units]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda u: features.extract(model, u, fcfg, ctx), units))


# -- stages -----------------------------------------------------------------

def train_target(run: Run):
    ds = run.member_data()
    n_classes = int(max(2, ds.labels.max() + 1))
    t = run.cfg["target"]
    model = nnet.build_model(ds.samples.shape[1], t["hidden_dims"], n_classes, t["activation"],
                             derive_seed(run.seed, "target_init"))
    model = nnet.train(model, ds.samples, ds.labels, run.train_config())
    acc = nnet.accuracy(model, ds.samples, ds.labels)
    run.out.mkdir(parents=True, exist_ok=True)
    doc = nnet.model_to_dict(model)
    doc["fingerprint"] = run.fingerprint
    doc["train_accuracy"] = acc
    with open(run.path(MODEL_FILE), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    run.record("train-target", MODEL_FILE)
    return model, acc


def load_target(run: Run):
    p = run.path(MODEL_FILE)
    if not p.exists():
        raise MissingModel(f"no trained target model at {p}; run train-target first")
    doc = json.loads(p.read_text(encoding="utf-8"))
    run.check_fingerprint(doc.get("fingerprint"), MODEL_FILE)
    return nnet.model_from_dict(doc)


def extract(run: Run):
    model = load_target(run)
    fcfg = run.feature_config()
    ctx = None
    if "ntk" in fcfg.families:
        pool = run.member_data()
        rng = np.random.default_rng(derive_seed(run.seed, "ntk_ref"))
        k = min(fcfg.ntk_ref_size, len(pool))
        idx = np.sort(rng.choice(len(pool), k, replace=False))
        ctx = features.build_ntk_context(model, features.AuditUnit(pool.samples[idx], pool.labels[idx], "ntk-ref"),
                                         fcfg.ntk_lambda)
    counts = {}
    for fname, groups in ((FEATURES_FILE, run.cfg["data"]["train_groups"]),
                          (CANDIDATES_FILE, run.cfg["data"]["test_groups"])):
        records = []
        for g in groups:
            units = run.group_units(g)
            vecs = extract_units(model, units, fcfg, ctx)
            records.extend((fv, g.get("label"), {"group": g["name"]}) for fv in vecs)
        if groups or fname == FEATURES_FILE:
            features.write_store(run.path(fname), records, run.fingerprint)
            counts[fname] = len(records)
        elif run.path(fname).exists():
            run.path(fname).unlink()
    run.record("extract", FEATURES_FILE)
    return counts


def _holdout_split(labels, fraction, seed):
    """Stratified holdout: returns a boolean mask of held-out rows."""
    mask = np.zeros(len(labels), dtype=bool)
    if fraction <= 0:
        return mask
    rng = np.random.default_rng(seed)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        k = datagen.largest_remainder(len(idx), [fraction, 1 - fraction])[0]
        mask[rng.permutation(idx)[:k]] = True
    return mask


def train_gp(run: Run):
    p = run.path(FEATURES_FILE)
    if not p.exists():
        raise ConfigError(f"no feature store at {p}; run extract first")
    recs = features.read_store(p)
    if not recs:
        raise ConfigError(f"{p}: feature store is empty")
    for r in recs:
        run.check_fingerprint(r.fingerprint, FEATURES_FILE)
    labels = np.array([r.label for r in recs])
    if set(labels.tolist()) != {0, 1}:
        raise SingleClass("the feature store must contain both member and non-member units")
    held = _holdout_split(labels, run.cfg["gp"]["holdout_fraction"], derive_seed(run.seed, "gp_holdout"))
    train_vecs = [r.vector for r, h in zip(recs, held) if not h]
    std = features.fit_standardizer(train_vecs)
    X, names = features.stack(train_vecs)
    ts = gpc.GpTrainingSet(std.transform(X), labels[~held])
    ts.require_both_classes()
    init_cfg = run.cfg["gp"]["init"]
    init = gpc.GpHyperparams(
        init_cfg["signal_variance"],
        init_cfg["lengthscale"] if init_cfg["lengthscale"] is not None else float(np.sqrt(X.shape[1])),
        init_cfg["noise_variance"],
    )
    hyper = gpc.optimize_hyperparams(ts, init, run.cfg["gp"]["steps"])
    post = gpc.fit_laplace(ts, hyper)
    lml_init = gpc.log_marginal(ts, init)
    extra = {
        "fingerprint": run.fingerprint,
        "feature_names": list(names),
        "standardizer": std.to_dict(),
        "holdout_units": [r.vector.unit_id for r, h in zip(recs, held) if h],
        "log_marginal_init": lml_init,
        "log_marginal_final": post.log_marginal,
    }
    gpc.save_posterior(post, run.path(POSTERIOR_FILE), extra)
    run.record("train-gp", POSTERIOR_FILE)
    return post, lml_init


def load_gp(run: Run):
    p = run.path(POSTERIOR_FILE)
    if not p.exists():
        raise ConfigError(f"no GP posterior at {p}; run train-gp first")
    post, doc = gpc.load_posterior(p)
    run.check_fingerprint(doc.get("fingerprint"), POSTERIOR_FILE)
    return post, features.Standardizer.from_dict(doc["standardizer"]), doc


def score_records(post, std, records):
    """Score feature-store records; raises FeatureSchemaMismatch on column mismatch."""
    if not records:
        return []
    for r in records:
        features.check_schema(std.names, r.vector.names)
    X = std.transform(np.vstack([r.vector.values for r in records]))
    mean, var = gpc.predict_latent(post, X)
    prob = gpc.expected_sigmoid(mean, var)
    return [
        {
            "unit_id": r.vector.unit_id,
            "group": r.meta.get("group", ""),
            "label": r.label,
            "probability": float(p),
            "latent_mean": float(m),
            "latent_variance": float(v),
        }
        for r, p, m, v in zip(records, prob, mean, var)
    ]


def write_scores(path, rows, fingerprint):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(dict(row, fingerprint=fingerprint), sort_keys=True) + "\n")


def read_scores(path):
    rows = []
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"scores file not found: {path}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{lineno}: malformed score row") from exc
    return rows


def infer(run: Run, feature_file=None):
    post, std, doc = load_gp(run)
    if feature_file is not None:
        records = features.read_store(feature_file)
    else:
        records = []
        held = set(doc.get("holdout_units", []))
        if held:
            records.extend(r for r in features.read_store(run.path(FEATURES_FILE)) if r.vector.unit_id in held)
        if run.path(CANDIDATES_FILE).exists():
            records.extend(features.read_store(run.path(CANDIDATES_FILE)))
        for r in records:
            run.check_fingerprint(r.fingerprint, "candidate features")
    if not records:
        raise ConfigError("nothing to score: no test groups, no GP holdout and no --features file")
    rows = score_records(post, std, records)
    write_scores(run.path(SCORES_FILE), rows, run.fingerprint)
    run.record("infer", SCORES_FILE)
    return rows


def evaluate(run: Run, scores_file=None):
    path = Path(scores_file) if scores_file else run.path(SCORES_FILE)
    rows = read_scores(path)
    if not rows:
        raise ConfigError(f"{path}: no scored units")
    for r in rows:
        run.check_fingerprint(r.get("fingerprint"), str(path))
    labelled = [r for r in rows if r.get("label") in (0, 1)]
    if len(labelled) != len(rows):
        raise ConfigError(f"{path}: {len(rows) - len(labelled)} units have no known label")
    scored = [evalkit.ScoredUnit(r["unit_id"], r["probability"], int(r["label"])) for r in labelled]
    ev = run.cfg["eval"]
    report = evalkit.evaluate(scored, ev["fpr_targets"], ev["threshold"])
    set_stats = {}
    for r in labelled:
        set_stats.setdefault(r.get("group", ""), []).append(r["probability"])
    extra = {
        "fingerprint": run.fingerprint,
        "set_stats": {g: {"n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v))}
                      for g, v in sorted(set_stats.items())},
    }
    evalkit.write_report(report, run.path(REPORT_FILE), extra)
    run.record("eval", REPORT_FILE)
    return report, extra["set_stats"]


STAGES = (
    ("train-target", MODEL_FILE, train_target),
    ("extract", FEATURES_FILE, extract),
    ("train-gp", POSTERIOR_FILE, train_gp),
    ("infer", SCORES_FILE, infer),
    ("eval", REPORT_FILE, evaluate),
)


def run_all(run: Run, echo=print):
    """Run every stage whose artifact is missing or stale; downstream stages re-run."""
    dirty = False
    results = {}
    for name, artifact, fn in STAGES:
        if not dirty and run.is_current(artifact):
            echo(f"[{name}] up to date ({artifact})")
            continue
        dirty = True
        echo(f"[{name}] running")
        results[name] = fn(run)
    return results
