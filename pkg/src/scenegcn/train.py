"""Experiment configuration, training loops, evaluation and attention export."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import SceneGraph
from .model import ConfigError, GraphBatch, ModelConfig, SceneGCN
from .optim import OptimizerState, adam_step, adamax_step, clip_gradients, epoch_lr
from .relation import (NegativeStats, RelationEncoder, RelationEncoderConfig, RelationLossConfig,
                       RelationSample, total_relation_loss)
from .synthetic import QARecord, SyntheticDataset, scene_graphs
from .text import Vocabulary

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "+width", "+q_att", "scenegcn", "scenegcn_2att", "implicit")
FAMILIES = ("attribute", "existence", "relation")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# --- answers and scoring ------------------------------------------------------------
def vqa_gt_score(votes: Mapping[str, int]) -> dict[str, float]:
    """Soft VQA credit: ``min(1, n / 3)`` for an answer given by ``n`` annotators."""
    out = {}
    for answer, n in votes.items():
        if n < 0:
            raise ValueError(f"negative vote count for {answer!r}")
        out[answer] = min(1.0, n / 3.0)
    return out


def build_answer_vocab(answers: Sequence[str] | Sequence[QARecord], threshold: int = 1) -> dict[str, int]:
    """Answers seen at least ``threshold`` times, most frequent first, ties broken alphabetically."""
    items = [a.answer if isinstance(a, QARecord) else a for a in answers]
    if not items:
        raise ConfigError("cannot build an answer vocabulary from no answers")
    counts = Counter(items)
    kept = sorted((a for a, c in counts.items() if c >= threshold), key=lambda a: (-counts[a], a))
    if not kept:
        raise ConfigError(f"no answer occurs {threshold} or more times (max is {max(counts.values())})")
    return {a: i for i, a in enumerate(kept)}


# --- configuration --------------------------------------------------------------------
@dataclass
class ExperimentConfig:
    variant: str = "scenegcn"
    d: int = 512
    d_q: int = 512
    heads: int = 1
    n_max: int = 36
    n_answers: int = 0  # 0: size of the answer vocabulary
    mlp_hidden: int = 1024
    dropout: float = 0.5
    gru_layers: int | None = None  # None: variant default
    q_att: bool | None = None
    batch_size: int = 256
    epochs: int = 20
    max_steps: int = 0  # 0: no cap
    lr: float = 1e-3
    lr_decay: float = 1.0
    clip_norm: float = 0.25
    answer_threshold: int = 1
    metric: str = "exact"  # exact (GQA style) or vqa (soft credit from votes)
    families: list | None = None  # restrict questions to these families
    seeds: list = field(default_factory=lambda: [0])
    data_dir: str = ""
    relation_ckpt: str = ""  # empty: ideal per-predicate edge vectors
    out_dir: str = "runs"
    # relation-encoder stage
    rel_data_dir: str = ""
    rel_per_predicate: int = 500
    rel_epochs: int = 5
    rel_lr: float = 1e-4
    rel_weight_decay: float = 1e-4
    rel_lr_decay: float = 0.8
    rel_batch_size: int = 64
    rel_conv_channels: int = 32
    rel_gru_hidden: int = 128
    rel_margin: float = 0.2
    rel_n_neg: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.variant == "scenegcn_2att" and self.heads != 2:
            raise ConfigError("variant scenegcn_2att needs heads = 2")
        if self.variant in ("scenegcn", "implicit") and self.heads != 1:
            raise ConfigError(f"variant {self.variant} uses a single attention head")
        if self.variant == "+width" and (self.d != 1024 or self.d_q != 1024):
            raise ConfigError("variant +width needs d = d_q = 1024")
        if self.d % self.heads:
            raise ConfigError(f"d = {self.d} is not divisible by heads = {self.heads}")
        if self.metric not in ("exact", "vqa"):
            raise ConfigError(f"metric must be 'exact' or 'vqa', got {self.metric!r}")
        if self.families is not None and not set(self.families) <= set(FAMILIES):
            raise ConfigError(f"unknown question families {sorted(set(self.families) - set(FAMILIES))}")
        for name in ("d", "d_q", "batch_size", "n_max", "answer_threshold", "rel_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.gru_layers not in (None, 1, 2):
            raise ConfigError("gru_layers must be 1 or 2")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every setting that influences results (paths and epoch count excluded)."""
        d = self.to_dict()
        for k in ("out_dir", "epochs", "data_dir", "relation_ckpt", "rel_data_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def with_variant(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Switch variant, adjusting the fields the variant pins down."""
    changes: dict = {"variant": variant}
    if variant == "scenegcn_2att":
        changes["heads"] = 2
    elif variant in ("scenegcn", "implicit"):
        changes["heads"] = 1
    if variant == "+width":
        changes.update(d=1024, d_q=1024)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return replace(cfg, **changes)


def model_config(cfg: ExperimentConfig, d_obj: int, vocab_size: int, n_answers: int,
                 rel_dim: int = 512) -> ModelConfig:
    graph = cfg.variant in ("scenegcn", "scenegcn_2att", "implicit")
    richer_question = cfg.variant not in ("baseline", "+width")
    return ModelConfig(
        d_obj=d_obj, vocab_size=vocab_size, n_answers=n_answers, d=cfg.d, d_q=cfg.d_q, heads=cfg.heads,
        rel_dim=rel_dim, mlp_hidden=cfg.mlp_hidden, dropout=cfg.dropout,
        gru_layers=cfg.gru_layers if cfg.gru_layers is not None else (2 if richer_question else 1),
        q_att=cfg.q_att if cfg.q_att is not None else richer_question,
        graph_conv=graph, implicit=cfg.variant == "implicit")


# --- prepared data ---------------------------------------------------------------------
@dataclass
class PreparedData:
    vocab: Vocabulary
    answers: list
    graphs: dict  # scene_id -> SceneGraph
    train: list  # questions with in-vocabulary answers
    val: list  # every validation question
    d_obj: int
    rel_dim: int
    lexicon: list  # predicate token lists, indexed like the world's predicates

    @property
    def answer_index(self) -> dict:
        return {a: i for i, a in enumerate(self.answers)}


def prepare_data(dataset: SyntheticDataset, cfg: ExperimentConfig, encoder: RelationEncoder | None = None,
                 answers: Sequence[str] | None = None) -> PreparedData:
    """Build scene graphs (encoder or ideal edges) and the answer vocabulary."""
    keep = (lambda q: True) if cfg.families is None else (lambda q: q.family in cfg.families)
    train = [q for q in dataset.questions_for("train") if keep(q)]
    val = [q for q in dataset.questions_for("val") if keep(q)]
    if answers is None:
        if not train:
            raise ConfigError("no training questions after filtering")
        answers = list(build_answer_vocab(train, cfg.answer_threshold))
    answers = list(answers)
    index = set(answers)
    train = [q for q in train if q.answer in index]
    graphs = scene_graphs(dataset.scenes, dataset.features, dataset.world, encoder)
    rel_dim = graphs[0].rel_dim if graphs else 512
    return PreparedData(
        vocab=dataset.world.vocabulary(), answers=answers,
        graphs={s.scene_id: g for s, g in zip(dataset.scenes, graphs)},
        train=train, val=val, d_obj=dataset.features[0].shape[1], rel_dim=rel_dim,
        lexicon=[dataset.world.predicate_tokens(p) for p in range(len(dataset.world.predicates))])


def make_batch(questions: Sequence[QARecord], data: PreparedData) -> GraphBatch:
    return GraphBatch.from_graphs([data.graphs[q.scene_id] for q in questions],
                                  [data.vocab.encode(q.tokens) for q in questions])


def make_targets(questions: Sequence[QARecord], data: PreparedData, metric: str = "exact") -> np.ndarray:
    index = data.answer_index
    out = np.zeros((len(questions), len(data.answers)))
    for row, q in enumerate(questions):
        if metric == "vqa" and q.votes:
            for a, s in vqa_gt_score(q.votes).items():
                if a in index:
                    out[row, index[a]] = s
        elif q.answer in index:
            out[row, index[q.answer]] = 1.0
    return out


# --- evaluation -------------------------------------------------------------------------
@dataclass
class EvalReport:
    overall: float
    per_family: dict  # family -> {"correct", "count", "accuracy"}
    n_questions: int
    loss_curve: list = field(default_factory=list)
    seed: int | None = None
    config_digest: str = ""
    epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def family_accuracy(self, family: str) -> float:
        return self.per_family[family]["accuracy"]


def score_predictions(pred: Sequence[int], questions: Sequence[QARecord], answers: Sequence[str],
                      metric: str = "exact") -> EvalReport:
    """Accuracy of predicted answer indices; out-of-vocabulary gold answers always score 0."""
    if len(pred) != len(questions):
        raise ValueError("one prediction per question is required")
    per: dict = {}
    total = 0.0
    for p, q in zip(pred, questions):
        guess = answers[int(p)]
        if metric == "vqa" and q.votes:
            credit = vqa_gt_score(q.votes).get(guess, 0.0)
        else:
            credit = float(guess == q.answer)
        slot = per.setdefault(q.family, {"correct": 0.0, "count": 0})
        slot["correct"] += credit
        slot["count"] += 1
        total += credit
    for slot in per.values():
        slot["accuracy"] = slot["correct"] / slot["count"]
    n = len(questions)
    return EvalReport(total / n if n else 0.0, dict(sorted(per.items())), n)


def score_matrix(scores: np.ndarray, questions: Sequence[QARecord], answers: Sequence[str],
                 metric: str = "exact") -> EvalReport:
    """Argmax scoring of a ``len(questions) x N_a`` score matrix (ties go to the lowest index)."""
    scores = np.asarray(scores)
    if scores.shape != (len(questions), len(answers)):
        raise ValueError(f"scores must be {len(questions)} x {len(answers)}, got {scores.shape}")
    return score_predictions(scores.argmax(axis=1), questions, answers, metric)


def predict_scores(model: SceneGCN, questions: Sequence[QARecord], data: PreparedData,
                   chunk: int = 512) -> np.ndarray:
    out = np.zeros((len(questions), len(data.answers)))
    with T.no_grad():
        for k in range(0, len(questions), chunk):
            part = questions[k:k + chunk]
            out[k:k + len(part)] = model.forward(make_batch(part, data)).scores.data
    return out


def evaluate_model(model: SceneGCN, data: PreparedData, split: str = "val", metric: str = "exact") -> EvalReport:
    questions = data.val if split == "val" else data.train
    return score_matrix(predict_scores(model, questions, data), questions, data.answers, metric)


# --- VQA training ----------------------------------------------------------------------
@dataclass
class TrainState:
    model: SceneGCN
    opt: OptimizerState
    rng: np.random.Generator
    seed: int
    epoch: int = 0  # completed epochs
    history: list = field(default_factory=list)  # one dict per epoch


def new_state(cfg: ExperimentConfig, data: PreparedData, seed: int) -> TrainState:
    n_answers = cfg.n_answers or len(data.answers)
    if n_answers != len(data.answers):
        raise ConfigError(f"config fixes {n_answers} answers, the data has {len(data.answers)}")
    mcfg = model_config(cfg, data.d_obj, len(data.vocab), n_answers, data.rel_dim)
    model = SceneGCN(mcfg, np.random.default_rng([seed, 0]))
    opt = OptimizerState("adamax", lr=cfg.lr, lr_decay=cfg.lr_decay)
    return TrainState(model, opt, np.random.default_rng([seed, 1]), seed)


def _diagnostic_dump(out_dir, epoch: int, batch_id: int, questions, loss) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / "nan_dump.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"epoch": epoch, "batch": batch_id, "loss": repr(loss),
                                "qids": [q.qid for q in questions]}, indent=1))
    return path


def train_epoch(state: TrainState, cfg: ExperimentConfig, data: PreparedData, out_dir=None) -> list[float]:
    """One pass over the training questions; returns the per-batch losses."""
    model, opt, rng = state.model, state.opt, state.rng
    opt.lr = epoch_lr(cfg.lr, cfg.lr_decay, state.epoch)
    order = rng.permutation(len(data.train))
    losses = []
    for batch_id, start in enumerate(range(0, len(order), cfg.batch_size)):
        if cfg.max_steps and opt.step >= cfg.max_steps:
            break
        qs = [data.train[i] for i in order[start:start + cfg.batch_size]]
        model.params.zero_grad()
        loss, _ = model.loss(make_batch(qs, data), make_targets(qs, data, cfg.metric), "train", rng)
        value = float(loss.data)
        if not np.isfinite(value):
            dump = _diagnostic_dump(out_dir, state.epoch, batch_id, qs, value)
            raise NumericError(f"non-finite loss {value} at epoch {state.epoch} batch {batch_id}"
                               + (f"; batch dumped to {dump}" if dump else ""))
        T.backward(loss)
        clip_gradients(model.params, cfg.clip_norm)
        adamax_step(model.params, opt)
        losses.append(value)
    return losses


def train(cfg: ExperimentConfig, data: PreparedData, seed: int | None = None, out_dir=None,
          resume=None, on_epoch: Callable[[TrainState, EvalReport], None] | None = None) -> TrainState:
    """Train one seed; write ``epoch_NNN.ckpt`` into ``out_dir`` after every epoch.

    ``resume`` is a checkpoint path to continue from; the continued run is
    bit-identical to an uninterrupted one.
    """
    seed = cfg.seeds[0] if seed is None else seed
    state = new_state(cfg, data, seed)
    if resume is not None:
        restore_state(state, cfg, resume)
    while state.epoch < cfg.epochs:
        if cfg.max_steps and state.opt.step >= cfg.max_steps:
            break
        losses = train_epoch(state, cfg, data, out_dir)
        report = evaluate_model(state.model, data, "val", cfg.metric) if data.val else None
        entry = {"epoch": state.epoch + 1, "loss": float(np.sum(losses)) / max(1, len(data.train)),
                 "steps": state.opt.step, "batch_losses": losses}
        if report is not None:
            entry.update(val_accuracy=report.overall, val_per_family=report.per_family)
        state.history.append(entry)
        state.epoch += 1
        log.info("seed %d epoch %d loss %.4f val %s", seed, state.epoch, entry["loss"],
                 f"{report.overall:.4f}" if report else "-")
        if out_dir is not None:
            save_train_checkpoint(Path(out_dir) / f"epoch_{state.epoch:03d}.ckpt", state, cfg, data)
        if on_epoch is not None and report is not None:
            report.seed, report.config_digest, report.epoch = seed, cfg.digest(), state.epoch
            report.loss_curve = [h["loss"] for h in state.history]
            on_epoch(state, report)
    return state


def final_report(state: TrainState, cfg: ExperimentConfig, data: PreparedData) -> EvalReport:
    report = evaluate_model(state.model, data, "val", cfg.metric)
    report.seed, report.config_digest, report.epoch = state.seed, cfg.digest(), state.epoch
    report.loss_curve = [h["loss"] for h in state.history]
    return report


# --- checkpoints --------------------------------------------------------------------------
def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train_checkpoint_parts(state: TrainState, cfg: ExperimentConfig, data: PreparedData):
    opt = state.opt
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, t in state.model.params.items():
        tensors[f"param/{name}"] = t.data
    for name in opt.m:
        tensors[f"opt_m/{name}"] = opt.m[name]
        tensors[f"opt_v/{name}"] = opt.v[name]
    header = {
        "kind": "vqa", "config": cfg.to_dict(), "config_digest": cfg.digest(), "seed": state.seed,
        "epoch": state.epoch, "history": state.history, "optimizer": opt.scalars(), "opt_counts": opt.t,
        "rng": _rng_state(state.rng), "answers": list(data.answers), "vocab": data.vocab.itos[2:],
        "model": asdict(state.model.cfg),
    }
    return header, tensors


def save_train_checkpoint(path, state: TrainState, cfg: ExperimentConfig, data: PreparedData) -> Path:
    return save_checkpoint(path, *train_checkpoint_parts(state, cfg, data))


def restore_state(state: TrainState, cfg: ExperimentConfig, path) -> None:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "vqa":
        raise ConfigError(f"{path} is not a VQA training checkpoint")
    if header["config_digest"] != cfg.digest():
        raise ConfigError(f"{path} was written with a different configuration")
    _load_into(state, header, tensors)


def _load_into(state: TrainState, header: dict, tensors) -> None:
    params = OrderedDict((k[len("param/"):], v) for k, v in tensors.items() if k.startswith("param/"))
    state.model.params.load_state(params)
    opt = state.opt
    for k, v in header["optimizer"].items():
        setattr(opt, k, v)
    opt.m = {k[len("opt_m/"):]: v.copy() for k, v in tensors.items() if k.startswith("opt_m/")}
    opt.v = {k[len("opt_v/"):]: v.copy() for k, v in tensors.items() if k.startswith("opt_v/")}
    opt.t = {k: int(v) for k, v in header["opt_counts"].items()}
    state.rng.bit_generator.state = header["rng"]
    state.seed = header["seed"]
    state.epoch = header["epoch"]
    state.history = header["history"]


def load_trained(path) -> tuple[SceneGCN, dict]:
    """Rebuild the model stored in a VQA checkpoint; returns (model, header)."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "vqa":
        raise ConfigError(f"{path} is not a VQA training checkpoint")
    model = SceneGCN(ModelConfig(**header["model"]), np.random.default_rng(0))
    model.params.load_state(OrderedDict((k[len("param/"):], v) for k, v in tensors.items()
                                        if k.startswith("param/")))
    return model, header


def check_vocab(header: dict, vocab: Vocabulary) -> None:
    if header["vocab"] != vocab.itos[2:]:
        raise ConfigError("checkpoint word vocabulary does not match the dataset")


# --- relation encoder --------------------------------------------------------------------
def relation_encoder_config(cfg: ExperimentConfig, vocab: Vocabulary, in_channels: int) -> RelationEncoderConfig:
    return RelationEncoderConfig(len(vocab), in_channels=in_channels, conv_channels=cfg.rel_conv_channels,
                                 gru_hidden=cfg.rel_gru_hidden)


def recall_at_1(encoder: RelationEncoder, samples: Sequence[RelationSample], lexicon, chunk: int = 1024) -> float:
    """Fraction of samples whose relation embedding retrieves their own predicate."""
    table = encoder.predicate_table(lexicon)
    keys = [tuple(p) for p in lexicon]
    hits = 0
    with T.no_grad():
        for k in range(0, len(samples), chunk):
            part = samples[k:k + chunk]
            r = encoder.encode_relation(np.stack([s.x_s for s in part]), np.stack([s.x_o for s in part]),
                                        np.stack([s.x_r for s in part]))
            best, _ = encoder.predict_predicate(r, lexicon, table)
            hits += sum(keys[b] == tuple(s.l_r) for b, s in zip(best, part))
    return hits / len(samples)


def train_relation_encoder(samples: Sequence[RelationSample], vocab: Vocabulary, cfg: ExperimentConfig,
                           seed: int = 0, lexicon=None, held_out: Sequence[RelationSample] = ()):
    """Adam with decoupled weight decay and per-epoch learning-rate decay.

    Returns (encoder, history); history entries hold the mean batch loss and,
    when ``held_out`` and ``lexicon`` are given, recall@1 on the held-out set.
    """
    if not samples:
        raise ConfigError("no relation samples to train on")
    enc = RelationEncoder(relation_encoder_config(cfg, vocab, samples[0].x_s.shape[0]), vocab,
                          np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    opt = OptimizerState("adam", lr=cfg.rel_lr, weight_decay=cfg.rel_weight_decay, lr_decay=cfg.rel_lr_decay)
    loss_cfg = RelationLossConfig(margin=cfg.rel_margin, n_pos=cfg.rel_batch_size, n_neg=cfg.rel_n_neg)
    stats = NegativeStats()
    history = []
    for epoch in range(cfg.rel_epochs):
        opt.lr = epoch_lr(cfg.rel_lr, cfg.rel_lr_decay, epoch)
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.rel_batch_size):
            batch = [samples[i] for i in order[start:start + cfg.rel_batch_size]]
            enc.params.zero_grad()
            terms = total_relation_loss(enc, batch, loss_cfg, rng, stats)
            value = float(terms.total.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite relation loss at epoch {epoch} batch {start // cfg.rel_batch_size}")
            T.backward(terms.total)
            adam_step(enc.params, opt)
            losses.append(value)
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "with_replacement": stats.with_replacement}
        if held_out and lexicon is not None:
            entry["recall_at_1"] = recall_at_1(enc, held_out, lexicon)
        history.append(entry)
        log.info("relation epoch %d loss %.4f %s", epoch + 1, entry["loss"],
                 f"recall@1 {entry['recall_at_1']:.3f}" if "recall_at_1" in entry else "")
    return enc, history


def save_relation_encoder(path, encoder: RelationEncoder, history: Sequence[dict] = ()) -> Path:
    header = {"kind": "relation", "encoder": asdict(encoder.cfg), "vocab": encoder.vocab.itos[2:],
              "history": list(history)}
    return save_checkpoint(path, header, OrderedDict(encoder.params.state()))


def load_relation_encoder(path) -> RelationEncoder:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "relation":
        raise ConfigError(f"{path} is not a relation-encoder checkpoint")
    enc = RelationEncoder(RelationEncoderConfig(**header["encoder"]), Vocabulary(header["vocab"]),
                          np.random.default_rng(0))
    enc.params.load_state(tensors)
    return enc


# --- attention export ----------------------------------------------------------------------
class PredicateLabeler:
    """Names an edge embedding: relation-encoder retrieval, or nearest ideal predicate vector."""

    def __init__(self, lexicon, encoder: RelationEncoder | None = None, ideal: np.ndarray | None = None):
        self.lexicon = [list(p) for p in lexicon]
        self.encoder = encoder
        if encoder is not None:
            self.table = encoder.predicate_table(self.lexicon)
        elif ideal is not None:
            self.table = np.asarray(ideal)
        else:
            raise ValueError("need a relation encoder or ideal predicate vectors")

    def __call__(self, r: np.ndarray) -> str:
        if self.encoder is not None:
            idx, _ = self.encoder.predict_predicate(r, self.lexicon, self.table)
        else:
            sims = self.table @ r / (np.linalg.norm(self.table, axis=1) * max(np.linalg.norm(r), 1e-12))
            idx = int(sims.argmax())
        return " ".join(self.lexicon[idx])


def attention_trace(model: SceneGCN, graph: SceneGraph, question: QARecord, data: PreparedData,
                    labeler: PredicateLabeler | None = None, top_k: int = 3) -> dict:
    """Forward one question and export its attention maps as plain JSON-ready data."""
    batch = make_batch([question], data)
    with T.no_grad():
        out = model.forward(batch)
    n = graph.n_nodes
    omega = out.object_attention.data[0, :n]
    central = int(np.argmax(omega))
    trace = {
        "qid": question.qid, "scene_id": question.scene_id, "question": question.text,
        "answer": question.answer, "prediction": data.answers[int(out.scores.data[0].argmax())],
        "boxes": None if graph.boxes is None else graph.boxes.tolist(),
        "object_attention": omega.tolist(), "central_object": central, "heads": [], "top_edges": [],
    }
    if out.edge_attention is None:
        return trace
    edges = model.relation_embeddings(batch).data[0] if model.cfg.implicit else graph.edge_embeddings
    att = out.edge_attention.data[0, :n, :n]  # [j, i, k]
    for k in range(att.shape[-1]):
        trace["heads"].append(att[:, :, k].tolist())
        incoming = att[:, central, k].copy()
        incoming[central] = -np.inf
        order = np.argsort(-incoming, kind="stable")[:min(top_k, n - 1)]
        for j in order:
            known = bool(graph.edge_known[j, central])
            label = labeler(edges[j, central]) if (labeler is not None and known) else (
                "unknown" if not known else None)
            trace["top_edges"].append({"head": k, "subject": int(j), "object": central,
                                       "weight": float(att[j, central, k]), "predicate": label})
    return trace


def top_edge_links(trace: dict, a: int, b: int) -> bool:
    """Whether the strongest exported edge joins nodes ``a`` and ``b`` (either direction)."""
    if not trace["top_edges"]:
        return False
    best = max(trace["top_edges"], key=lambda e: e["weight"])
    return {best["subject"], best["object"]} == {a, b}


# --- checkpoint-level entry points -----------------------------------------------------------
def _edge_encoder(cfg: ExperimentConfig) -> RelationEncoder | None:
    return load_relation_encoder(cfg.relation_ckpt) if cfg.relation_ckpt else None


def load_for_eval(ckpt, data_dir=None, dataset: SyntheticDataset | None = None):
    """Model, config, prepared data and edge encoder for a saved VQA checkpoint."""
    from .synthetic import read_dataset

    model, header = load_trained(ckpt)
    cfg = ExperimentConfig.from_dict(header["config"])
    if dataset is None:
        dataset = read_dataset(data_dir or cfg.data_dir)
    encoder = _edge_encoder(cfg)
    data = prepare_data(dataset, cfg, encoder, answers=header["answers"])
    check_vocab(header, data.vocab)
    if data.d_obj != model.cfg.d_obj:
        raise ConfigError(f"dataset node width {data.d_obj} != model input width {model.cfg.d_obj}")
    return model, cfg, data, encoder, dataset


def evaluate(ckpt, data_dir=None, dataset: SyntheticDataset | None = None, split: str = "val") -> EvalReport:
    model, cfg, data, _, _ = load_for_eval(ckpt, data_dir, dataset)
    header, _ = load_checkpoint(ckpt)
    report = evaluate_model(model, data, split, cfg.metric)
    report.seed, report.config_digest, report.epoch = header["seed"], header["config_digest"], header["epoch"]
    report.loss_curve = [h["loss"] for h in header["history"]]
    return report


def dump_attention(ckpt, qid: int, out=None, data_dir=None, dataset: SyntheticDataset | None = None) -> dict:
    """AttentionTrace for question ``qid``; written as JSON to ``out`` when given."""
    model, cfg, data, encoder, dataset = load_for_eval(ckpt, data_dir, dataset)
    by_id = {q.qid: q for q in dataset.questions}
    if qid not in by_id:
        raise KeyError(f"no question with id {qid}")
    q = by_id[qid]
    labeler = PredicateLabeler(data.lexicon, encoder, None if encoder else dataset.world.ideal_edges)
    trace = attention_trace(model, data.graphs[q.scene_id], q, data, labeler)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(trace, indent=1))
    return trace
