"""Config-driven end-to-end experiment: train attacker, shift, filter, evaluate."""

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import seqnet
from .attack import MimicModel, MimicShift, make_shift_schedule
from .filters import (IterativeClassifierFilter, NOnlyFilter, NOverDFilter, NormalModel,
                      decide, make_interval_schedule, minmax_normalize, reject_mask,
                      run_online, write_decision_log)
from .markov import PUBLISHED_PROFILES, MarkovParams, ShiftProfile, empirical_transition
from .metrics import (ACCEPTANCE, REJECTION, compute_metrics, confusion, emit_report,
                      histogram_overlap, rate_curve)
from .traffic import (SKEW_PRESETS, FeatureClassGrouper, Vocabulary,
                      ingest_csv, synth_normal_corpus)

FILTER_NAMES = ("N-only", "N-over-D", "Iterative", "Enhanced-N-over-D", "Enhanced-Iterative")
MODES = ("static", "shifting")
STAGES = ("synth", "gan", "normal", "schedule", "generate", "filters", "intervals")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {exc}")


# ------------------------------------------------------------------ config


def preset_text(name="paper-defaults"):
    res = resources.files("mimicshift").joinpath(f"data/{name}.toml")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return res.read_text()


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    data: dict
    seed: int = 7
    out_dir: str = "results"
    base_dir: str = "."

    @classmethod
    def from_toml(cls, text, base=None, **kw):
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        data = _merge(tomllib.loads(preset_text()), doc) if base is None else _merge(base, doc)
        cfg = cls(data, **kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path_or_preset="paper-defaults", **kw):
        if os.path.exists(path_or_preset):
            with open(path_or_preset) as fh:
                text = fh.read()
            kw.setdefault("base_dir", os.path.dirname(os.path.abspath(path_or_preset)))
            return cls.from_toml(text, **kw)
        return cls.from_toml(preset_text(path_or_preset), **kw)

    def section(self, name):
        return self.data.get(name, {})

    def validate(self):
        c, a, t, f = (self.section(s) for s in ("corpus", "attack", "traffic", "filters"))
        src = c.get("source", "synth")
        if src == "synth":
            if c.get("preset") not in SKEW_PRESETS:
                raise ConfigError(f"corpus.preset must be one of {sorted(SKEW_PRESETS)}")
        elif not os.path.exists(self.resolve(src)):
            raise ConfigError(f"corpus.source {src!r} does not exist")
        unknown = set(f.get("names", ())) - set(FILTER_NAMES)
        if unknown:
            raise ConfigError(f"unknown filters {sorted(unknown)}")
        if len(set(f.get("names", ()))) != len(f.get("names", ())):
            raise ConfigError("filters.names lists a filter twice")
        if not 0 < t.get("alpha", 0.8) < 1:
            raise ConfigError("traffic.alpha must lie in (0, 1)")
        if not 0 <= f.get("rejection_rate", 0.8) <= 1:
            raise ConfigError("filters.rejection_rate must lie in [0, 1]")
        if a.get("omega", 3) < 1:
            raise ConfigError("attack.omega must be >= 1")
        if t.get("n_minutes", 1) < 1 or t.get("requests_per_minute", 1) < 1:
            raise ConfigError("traffic.n_minutes and requests_per_minute must be positive")
        if not 1 <= t.get("test_minutes", 1) <= t.get("n_minutes", 1):
            raise ConfigError("traffic.test_minutes must lie in [1, n_minutes]")
        try:
            self.profiles()
        except ValueError as exc:
            raise ConfigError(f"attack.profiles: {exc}") from None
        return self

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def profiles(self):
        p = self.section("attack").get("profiles", "published")
        if p == "published":
            return ShiftProfile(PUBLISHED_PROFILES)
        return ShiftProfile([MarkovParams(d["pi"], d["trans"]) for d in p])

    def stage_seed(self, stage):
        ss = np.random.SeedSequence([int(self.seed), STAGES.index(stage)])
        return int(ss.generate_state(1)[0])


# ------------------------------------------------------------------ bundles


def save_attacker(model, directory):
    os.makedirs(directory, exist_ok=True)
    seqnet.save_checkpoint(model.generator_, os.path.join(directory, "generator.ckpt"))
    seqnet.save_checkpoint(model.discriminator_, os.path.join(directory, "discriminator.ckpt"))
    seqnet.save_checkpoint(model.mimic_.params_, os.path.join(directory, "mimic.ckpt"))
    meta = {"params": model.get_params(), "vocab": model.vocab_.to_list(),
            "top_values": model.class_map_.top_values_.tolist(),
            "frequencies": model.class_map_.frequencies_.tolist(),
            "d_accuracy": model.d_accuracy_, "warnings": model.warnings_}
    with open(os.path.join(directory, "attacker.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return directory


def load_attacker(directory):
    with open(os.path.join(directory, "attacker.json")) as fh:
        meta = json.load(fh)
    model = MimicShift(**meta["params"])
    model._seed = 0 if model.random_state is None else int(model.random_state)
    model.vocab_ = Vocabulary.from_list(meta["vocab"])
    cm = FeatureClassGrouper(model.n_classes)
    cm.top_values_ = np.asarray(meta["top_values"], dtype=np.float64)
    cm.frequencies_ = np.asarray(meta["frequencies"], dtype=np.float64)
    model.class_map_ = cm
    model.token_classes_ = np.asarray(cm.token_classes(model.vocab_), dtype=np.int64)
    model.n_tokens_ = len(model.vocab_)
    model.generator_ = seqnet.load_checkpoint(os.path.join(directory, "generator.ckpt"))
    model.discriminator_ = seqnet.load_checkpoint(os.path.join(directory, "discriminator.ckpt"))
    mimic = MimicModel(n_symbols=model.n_classes, n_hidden=model.mimic_hidden)
    mimic.params_ = seqnet.load_checkpoint(os.path.join(directory, "mimic.ckpt"))
    mimic.n_symbols_ = model.n_classes
    model.mimic_ = mimic
    model.d_accuracy_ = meta["d_accuracy"]
    model.warnings_ = meta["warnings"]
    return model


def save_normal(model, directory, vocab=None):
    os.makedirs(directory, exist_ok=True)
    seqnet.save_checkpoint(model.params_, os.path.join(directory, "normal.ckpt"))
    params = model.get_params()
    params.pop("n_symbols", None)
    meta = {"params": params, "n_tokens": model.n_tokens_,
            "train_nll": model.train_nll_, "heldout_nll": model.heldout_nll_,
            "vocab": None if vocab is None else vocab.to_list()}
    with open(os.path.join(directory, "normal.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return directory


def load_normal(directory):
    """Returns ``(model, vocab)``; vocab is None when it was not saved."""
    with open(os.path.join(directory, "normal.json")) as fh:
        meta = json.load(fh)
    model = NormalModel(**meta["params"])
    model.n_tokens_ = meta["n_tokens"]
    model.unk_ = model.n_tokens_
    model.n_symbols = model.n_symbols_ = model.n_tokens_ + 1
    model.params_ = seqnet.load_checkpoint(os.path.join(directory, "normal.ckpt"))
    model.train_nll_, model.heldout_nll_ = meta["train_nll"], meta["heldout_nll"]
    model.n_unknown_ = 0
    vocab = None if meta["vocab"] is None else Vocabulary.from_list(meta["vocab"])
    return model, vocab


# ---------------------------------------------------------------- pipeline


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    overlaps: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    decision_logs: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    attacker: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def row(self, mode, model):
        for r in self.rows:
            if r.dataset == mode and r.model == model:
                return r
        raise KeyError((mode, model))


def _load_corpus(cfg):
    c = cfg.section("corpus")
    if c.get("source", "synth") == "synth":
        spec = SKEW_PRESETS[c["preset"]]
        return synth_normal_corpus(spec, int(c.get("n_requests", 10000)),
                                   cfg.stage_seed("synth"), c.get("feature_name", "request_len"))
    return ingest_csv(cfg.resolve(c["source"]), feature_name=c.get("feature_name", "request_len"))


def _split_normal(corpus, n_reserve):
    n = len(corpus)
    if n_reserve >= n // 2:
        raise ConfigError(f"corpus of {n} requests too small to reserve {n_reserve} "
                          "normal requests for the attack period")
    return (corpus.subset(range(n - n_reserve)),
            corpus.subset(range(n - n_reserve, n)))


def _build_minutes(cfg, gan, reserve, schedule_params):
    t = cfg.section("traffic")
    rpm = int(t.get("requests_per_minute", 1000))
    n_attack = int(round(t.get("alpha", 0.8) * rpm))
    n_normal = rpm - n_attack
    normal_tokens = reserve.token_sequences()
    minutes, audits = [], []
    base = cfg.stage_seed("generate")
    for m, params in enumerate(schedule_params):
        rng = np.random.default_rng([base, m])
        att = gan.generate_interval(params, n_attack, rng, interval_index=m)
        seqs = att.token_sequences() + normal_tokens[m * n_normal:(m + 1) * n_normal]
        labels = np.r_[np.ones(n_attack, dtype=np.int64), np.zeros(n_normal, dtype=np.int64)]
        order = rng.permutation(len(seqs))
        minutes.append(([seqs[i] for i in order], labels[order]))
        inj = att.metadata["injected_classes"]
        audits.append({"minute": m,
                       "class_freq": (np.bincount(inj.ravel(), minlength=gan.n_classes)
                                      / inj.size).round(6).tolist(),
                       "transition": empirical_transition(inj, gan.n_classes)
                       .matrix.round(6).tolist()})
    return minutes, audits


def _make_filter(name, cfg, normal_model, train_normal):
    f = cfg.section("filters")
    seed = cfg.stage_seed("filters")
    base = name.replace("Enhanced-", "")
    if base == "N-only":
        return NOnlyFilter(normal_model)
    if base == "N-over-D":
        nd = f.get("n_over_d", {})
        return NOverDFilter(normal_model, learning_rate=nd.get("learning_rate", 0.03),
                            epochs_per_interval=nd.get("epochs_per_interval", 3),
                            random_state=seed)
    it = f.get("iterative", {})
    return IterativeClassifierFilter(
        normal_model, train_normal, alpha=cfg.section("traffic").get("alpha", 0.8),
        n_hidden=it.get("n_hidden", 32), learning_rate=it.get("learning_rate", 0.03),
        epochs_per_interval=it.get("epochs_per_interval", 3),
        replay_ratio=it.get("replay_ratio", 1.0), random_state=seed)


def _interval_schedule(name, cfg, n_minutes):
    f = cfg.section("filters")
    if name.startswith("Enhanced-"):
        return make_interval_schedule("randomized", n_minutes, cfg.stage_seed("intervals"),
                                      first_length=f.get("randomized_first", 5),
                                      choices=tuple(f.get("randomized_choices", (1, 2, 3))))
    return make_interval_schedule("fixed", n_minutes, length=f.get("interval", 1))


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def train_attacker(cfg, train_normal):
    a = cfg.section("attack")
    keys = ("omega", "batch_size", "seq_len", "lr_mimic", "lr_gan", "mimic_hidden",
            "generator_hidden", "discriminator_hidden", "n_iterations",
            "mimic_pretrain_epochs", "generator_pretrain_epochs", "lr_pretrain",
            "real_condition", "real_source")
    params = {k: a[k] for k in keys if k in a}
    return MimicShift(n_classes=cfg.section("corpus").get("n_classes", 3),
                      random_state=cfg.stage_seed("gan"), **params).fit(train_normal)


def train_normal(cfg, train_normal_corpus):
    n = cfg.section("filters").get("normal", {})
    return NormalModel(n_tokens=len(train_normal_corpus.vocab), n_hidden=n.get("n_hidden", 32),
                       n_epochs=n.get("n_epochs", 5), learning_rate=n.get("learning_rate", 0.01),
                       random_state=cfg.stage_seed("normal")).fit(train_normal_corpus)


def run_experiment(cfg, out_dir=None, write=True):
    """Run every configured filter against a static and a shifting attacker.

    Both runs share per-minute generation seeds and the static run replays the
    shifting schedule's final setting, so the held-out test minutes are
    identical and only the training history differs. A failing stage aborts
    the run; ``error.json`` in the output directory then names the stage and
    holds the rows finished so far.
    """
    out_dir = out_dir or cfg.out_dir
    result = ExperimentResult()
    try:
        return _run(cfg, out_dir, write, result)
    except StageError as exc:
        if write:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w") as fh:
                json.dump({"stage": exc.stage, "message": str(exc),
                           "rows": [{"dataset": r.dataset, "model": r.model, "fnr": r.fnr,
                                     "fpr": r.fpr} for r in result.rows],
                           "schedule": result.schedule}, fh, indent=1, default=str)
        raise


def _run(cfg, out_dir, write, result):
    t = cfg.section("traffic")
    f = cfg.section("filters")
    n_minutes = int(t.get("n_minutes", 10))
    n_test = int(t.get("test_minutes", 1))
    rpm = int(t.get("requests_per_minute", 1000))
    n_normal = rpm - int(round(t.get("alpha", 0.8) * rpm))
    rate = f.get("rejection_rate", 0.8)
    bins = cfg.section("report").get("histogram_bins", 20)

    corpus = _stage("corpus", _load_corpus, cfg)
    train_corpus, reserve = _stage("corpus", _split_normal, corpus, n_minutes * n_normal)
    gan = _stage("train-attacker", train_attacker, cfg, train_corpus)
    normal_model = _stage("train-normal", train_normal, cfg, train_corpus)

    profiles = cfg.profiles()
    idx, shift_params = make_shift_schedule(profiles, n_minutes, cfg.stage_seed("schedule"))
    static_sel = cfg.section("attack").get("static_profile", "last")
    static_idx = int(idx[-1]) if static_sel == "last" else int(static_sel)
    schedules = {"shifting": [int(i) for i in idx], "static": [static_idx] * n_minutes}

    result.attacker = {"d_accuracy": gan.d_accuracy_, "warnings": list(gan.warnings_),
                       "update_counts": sorted(set(gan.update_counts_))}
    for mode in MODES:
        plist = [profiles[i] for i in schedules[mode]]
        minutes, audits = _stage("attack", _build_minutes, cfg, gan, reserve, plist)
        result.schedule[mode] = {"profile_index": schedules[mode], "audit": audits}
        test_slice = slice(n_minutes - n_test, n_minutes)
        test_labels = np.concatenate([lab for _, lab in minutes[test_slice]])
        for name in f.get("names", FILTER_NAMES):
            filt = _make_filter(name, cfg, normal_model, train_corpus).fit()
            sched = _interval_schedule(name, cfg, n_minutes)
            run = _stage(f"filter:{name}", run_online, filt, [s for s, _ in minutes], sched,
                         bool(f.get("causal", False)))
            decisions_all, labels_all = [], []
            for m, (_, lab) in enumerate(minutes):
                decisions_all += decide(run.raw_scores[m], rate, interval=run.interval_of[m])
                labels_all += ["attack" if x else "normal" for x in lab]
            test_raw = np.concatenate(run.raw_scores[test_slice])
            rej = np.concatenate([reject_mask(run.raw_scores[m], rate)
                                  for m in range(n_minutes)[test_slice]])
            row = compute_metrics(confusion(rej, test_labels), dataset=mode, model=name,
                                  interval="randomized" if name.startswith("Enhanced-")
                                  else str(f.get("interval", 1)))
            result.rows.append(row)
            key = f"{mode}/{name}"
            result.curves[f"{key}/fnr"] = rate_curve(test_raw, test_labels, ACCEPTANCE)
            result.curves[f"{key}/fpr"] = rate_curve(test_raw, test_labels, REJECTION)
            norm = minmax_normalize(test_raw)
            result.overlaps[key] = histogram_overlap(norm[test_labels == 0],
                                                     norm[test_labels == 1], bins=bins)
            result.decision_logs[key] = (decisions_all, labels_all)
            result.schedule[mode].setdefault("intervals", {})[name] = [
                list(b) for b in run.boundaries]
    if write:
        _write_outputs(result, cfg, out_dir, gan, normal_model)
    return result


def _write_outputs(result, cfg, out_dir, gan, normal_model):
    os.makedirs(out_dir, exist_ok=True)
    files = emit_report(result.rows, result.curves, os.path.join(out_dir, "metrics.json"), "json")
    files += emit_report(result.rows, result.curves, os.path.join(out_dir, "metrics.csv"), "csv")
    summary = {"schema_version": 1, "seed": cfg.seed,
               "overlaps": {k: round(v, 12) for k, v in result.overlaps.items()},
               "attacker": result.attacker, "schedule": result.schedule}
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    files.append(path)
    logdir = os.path.join(out_dir, "decisions")
    os.makedirs(logdir, exist_ok=True)
    for key, (decs, labels) in result.decision_logs.items():
        p = os.path.join(logdir, key.replace("/", "_") + ".csv")
        write_decision_log(p, decs, labels)
        files.append(p)
    ck = os.path.join(out_dir, "checkpoints")
    save_attacker(gan, os.path.join(ck, "attacker"))
    save_normal(normal_model, os.path.join(ck, "normal"), gan.vocab_)
    result.checkpoints = {"attacker": os.path.join(ck, "attacker"),
                          "normal": os.path.join(ck, "normal")}
    result.files = files
