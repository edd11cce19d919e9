"""Synthetic relational scenes with analytically known answers.

A :class:`SyntheticWorld` fixes prototype feature maps for object
categories and predicates.  Scenes place non-overlapping boxes, derive a
closed-world relation list from geometry (plus a few semantic predicates)
and emit questions in three families: attribute, existence and relation.
Object features carry category and attribute but never position, so
relation questions can only be answered through the edges.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import REL_DIM, SceneGraph, save_features
from .relation import RelationSample
from .text import Vocabulary

CATEGORIES = ["dog", "cat", "car", "tree", "cup", "bird", "ball", "chair", "lamp", "book", "horse", "boat"]
ATTRIBUTES = ["red", "blue", "green", "yellow", "white", "black"]
SPATIAL_PREDICATES = ["left of", "right of", "above", "below"]
SEMANTIC_PREDICATES = [
    "holding", "watching", "touching", "wearing", "riding", "eating", "carrying", "pulling",
    "pushing", "near", "behind", "in front of", "next to", "on", "under", "inside",
]
PREDICATES = SPATIAL_PREDICATES + SEMANTIC_PREDICATES


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_categories: int = 8
    n_attributes: int = 4
    n_predicates: int = 20
    channels: int = 16
    map_noise: float = 0.5
    union_weight: float = 0.5
    rel_dim: int = REL_DIM


class SyntheticWorld:
    """Vocabulary and prototype maps shared by relation samples and scenes."""

    def __init__(self, cfg: WorldConfig = WorldConfig()):
        if not 2 <= cfg.n_categories <= len(CATEGORIES):
            raise ValueError(f"n_categories must be in [2, {len(CATEGORIES)}]")
        if not 1 <= cfg.n_attributes <= len(ATTRIBUTES):
            raise ValueError(f"n_attributes must be in [1, {len(ATTRIBUTES)}]")
        if not len(SPATIAL_PREDICATES) <= cfg.n_predicates <= len(PREDICATES):
            raise ValueError(f"n_predicates must be in [4, {len(PREDICATES)}]")
        self.cfg = cfg
        self.categories = CATEGORIES[:cfg.n_categories]
        self.attributes = ATTRIBUTES[:cfg.n_attributes]
        self.predicates = PREDICATES[:cfg.n_predicates]
        rng = np.random.default_rng([cfg.seed, 7001])
        shape = (cfg.channels, 7, 7)
        self.category_maps = rng.normal(size=(cfg.n_categories,) + shape)
        self.predicate_maps = rng.normal(size=(cfg.n_predicates,) + shape)
        ideal = rng.normal(size=(cfg.n_predicates, cfg.rel_dim))
        self.ideal_edges = ideal / np.linalg.norm(ideal, axis=1, keepdims=True)

    def predicate_tokens(self, p: int) -> list[str]:
        return self.predicates[p].split()

    def predicate_index(self, tokens: Sequence[str]) -> int:
        return self.predicates.index(" ".join(tokens))

    def vocabulary(self) -> Vocabulary:
        words = ["what", "color", "is", "the", "there", "a", "?", "yes", "no"]
        words += self.categories + self.attributes
        for p in self.predicates:
            words += p.split()
        return Vocabulary(dict.fromkeys(words))

    def pair_maps(self, subj: int, obj: int, pred: int, rng: np.random.Generator):
        """Feature maps for one (subject, predicate, object) triple."""
        noise = self.cfg.map_noise
        x_s = self.category_maps[subj] + noise * rng.normal(size=self.category_maps[subj].shape)
        x_o = self.category_maps[obj] + noise * rng.normal(size=x_s.shape)
        union = self.predicate_maps[pred] + self.cfg.union_weight * (self.category_maps[subj] + self.category_maps[obj])
        x_r = union + noise * rng.normal(size=x_s.shape)
        return x_s, x_o, x_r

    def relation_samples(self, per_predicate: int, rng: np.random.Generator,
                         max_per_predicate: int | None = None) -> list[RelationSample]:
        """Training triples, ``per_predicate`` of each predicate (optionally capped)."""
        count = per_predicate if max_per_predicate is None else min(per_predicate, max_per_predicate)
        out = []
        for p in range(len(self.predicates)):
            for _ in range(count):
                s, o = rng.choice(len(self.categories), size=2, replace=False)
                x_s, x_o, x_r = self.pair_maps(s, o, p, rng)
                out.append(RelationSample(x_s, x_o, x_r, [self.categories[s]], [self.categories[o]],
                                          self.predicate_tokens(p)))
        order = rng.permutation(len(out))
        return [out[i] for i in order]


# --- scenes ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SceneConfig:
    objects_min: int = 3
    objects_max: int = 5
    n_max: int = 36
    n_semantic: int = 3
    semantic_rate: float = 0.15
    unknown_rate: float = 0.05
    noise_dims: int = 16
    noise_std: float = 0.1
    box_min: float = 0.08
    box_max: float = 0.2
    max_retries: int = 500
    # questions per scene, by kind
    attribute: int = 1
    existence: int = 1
    relation_open: int = 1
    relation_binary: int = 1
    binary_negatives: str = "predicate"  # or "subject": keep the predicate, swap in a non-matching subject


@dataclass
class ObjectRecord:
    category: int
    attribute: int
    box: tuple


@dataclass
class SyntheticScene:
    scene_id: int
    objects: list
    relations: list  # (subject, predicate, object) triples

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def label_matrix(self) -> np.ndarray:
        """``N x N`` predicate indices, ``-1`` on the diagonal and for unknown pairs."""
        n = self.n_objects
        labels = np.full((n, n), -1, dtype=np.int64)
        for s, p, o in self.relations:
            labels[s, o] = p
        return labels

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id,
                "objects": [{"category": o.category, "attribute": o.attribute, "box": list(o.box)} for o in self.objects],
                "relations": [list(r) for r in self.relations]}

    @classmethod
    def from_json(cls, rec: dict) -> "SyntheticScene":
        objs = [ObjectRecord(o["category"], o["attribute"], tuple(o["box"])) for o in rec["objects"]]
        return cls(rec["scene_id"], objs, [tuple(r) for r in rec["relations"]])


@dataclass
class QARecord:
    qid: int
    scene_id: int
    tokens: list
    answer: str
    family: str  # attribute | existence | relation
    form: str  # open | binary
    anchor: int | None = None
    target: int | None = None
    votes: dict | None = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def spatial_predicate(box_a, box_b) -> int:
    """Predicate index of ``a`` relative to ``b`` along the dominant centre axis."""
    ax, ay = (box_a[0] + box_a[2]) / 2, (box_a[1] + box_a[3]) / 2
    bx, by = (box_b[0] + box_b[2]) / 2, (box_b[1] + box_b[3]) / 2
    dx, dy = bx - ax, by - ay
    if abs(dx) >= abs(dy):
        return 0 if dx > 0 else 1  # left of / right of
    return 2 if dy > 0 else 3  # above / below (image y grows downward)


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def place_boxes(n: int, cfg: SceneConfig, rng: np.random.Generator) -> list:
    boxes: list = []
    for _ in range(cfg.max_retries):
        if len(boxes) == n:
            return boxes
        w, h = rng.uniform(cfg.box_min, cfg.box_max, size=2)
        x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
        if not any(_overlaps(box, b) for b in boxes):
            boxes.append(box)
    if len(boxes) == n:
        return boxes
    raise GenerationError(f"could not place {n} non-overlapping boxes in {cfg.max_retries} tries")


def scene_predicates(world: SyntheticWorld, cfg: SceneConfig) -> list[int]:
    n_sem = min(cfg.n_semantic, len(world.predicates) - len(SPATIAL_PREDICATES))
    return list(range(len(SPATIAL_PREDICATES) + n_sem))


def generate_scene(scene_id: int, world: SyntheticWorld, cfg: SceneConfig, rng: np.random.Generator) -> SyntheticScene:
    lo, hi = cfg.objects_min, cfg.objects_max
    if not (2 <= lo <= hi <= cfg.n_max) or hi > len(world.categories):
        raise ValueError(f"object count range [{lo}, {hi}] must lie in [2, min(n_max, n_categories)]")
    n = int(rng.integers(lo, hi + 1))
    cats = rng.choice(len(world.categories), size=n, replace=False)
    attrs = rng.integers(0, len(world.attributes), size=n)
    boxes = place_boxes(n, cfg, rng)
    objects = [ObjectRecord(int(c), int(a), b) for c, a, b in zip(cats, attrs, boxes)]
    semantic = scene_predicates(world, cfg)[len(SPATIAL_PREDICATES):]
    relations = []
    for s in range(n):
        for o in range(n):
            if s == o:
                continue
            draw = rng.random()
            if draw < cfg.unknown_rate:
                continue
            if semantic and draw < cfg.unknown_rate + cfg.semantic_rate:
                p = int(rng.choice(semantic))
            else:
                p = spatial_predicate(boxes[s], boxes[o])
            relations.append((s, p, o))
    return SyntheticScene(scene_id, objects, relations)


def node_features(scene: SyntheticScene, world: SyntheticWorld, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """one-hot(category) ++ one-hot(attribute) ++ Gaussian noise; no position."""
    n_c, n_a = len(world.categories), len(world.attributes)
    feats = np.zeros((scene.n_objects, n_c + n_a + cfg.noise_dims))
    for k, obj in enumerate(scene.objects):
        feats[k, obj.category] = 1.0
        feats[k, n_c + obj.attribute] = 1.0
    feats[:, n_c + n_a:] = cfg.noise_std * rng.normal(size=(scene.n_objects, cfg.noise_dims))
    return feats


def feature_dim(world: SyntheticWorld, cfg: SceneConfig) -> int:
    return len(world.categories) + len(world.attributes) + cfg.noise_dims


def generate_questions(scene: SyntheticScene, world: SyntheticWorld, cfg: SceneConfig,
                       rng: np.random.Generator, first_qid: int = 0,
                       kinds: Sequence[str] = ("attribute", "existence", "relation_open", "relation_binary")) -> list[QARecord]:
    cats = world.categories
    out: list[QARecord] = []

    def emit(tokens, answer, family, form, anchor=None, target=None):
        out.append(QARecord(first_qid + len(out), scene.scene_id, tokens, answer, family, form, anchor, target))

    present = {o.category for o in scene.objects}
    labels = scene.label_matrix()
    n = scene.n_objects
    preds = scene_predicates(world, cfg)
    for kind in kinds:
        for _ in range(getattr(cfg, kind)):
            if kind == "attribute":
                k = int(rng.integers(n))
                obj = scene.objects[k]
                emit(["what", "color", "is", "the", cats[obj.category], "?"], world.attributes[obj.attribute],
                     "attribute", "open", anchor=k)
            elif kind == "existence":
                absent = [c for c in range(len(cats)) if c not in present]
                if absent and rng.random() < 0.5:
                    emit(["is", "there", "a", cats[int(rng.choice(absent))], "?"], "no", "existence", "binary")
                else:
                    k = int(rng.integers(n))
                    emit(["is", "there", "a", cats[scene.objects[k].category], "?"], "yes", "existence", "binary",
                         anchor=k)
            elif kind == "relation_open":
                # (predicate, anchor) pairs with exactly one subject
                options = []
                for i in range(n):
                    for p in preds:
                        subjects = np.flatnonzero(labels[:, i] == p)
                        if len(subjects) == 1:
                            options.append((p, i, int(subjects[0])))
                if not options:
                    continue
                p, i, j = options[int(rng.integers(len(options)))]
                emit(["what", "is", *world.predicate_tokens(p), "the", cats[scene.objects[i].category], "?"],
                     cats[scene.objects[j].category], "relation", "open", anchor=i, target=j)
            elif kind == "relation_binary":
                pairs = [(s, o) for s in range(n) for o in range(n) if labels[s, o] >= 0]
                if not pairs:
                    continue
                s, o = pairs[int(rng.integers(len(pairs)))]
                p = int(labels[s, o])
                answer = "yes"
                if cfg.binary_negatives == "predicate":
                    if rng.random() >= 0.5:
                        p = int(rng.choice([q for q in preds if q != p]))
                        answer = "no"
                else:
                    # swap in a subject that does not stand in relation p to o
                    others = [k for k in range(n) if k not in (s, o) and labels[k, o] != p]
                    if others and rng.random() >= 0.5:
                        s = others[int(rng.integers(len(others)))]
                        answer = "no"
                emit(["is", "the", cats[scene.objects[s].category], *world.predicate_tokens(p), "the",
                      cats[scene.objects[o].category], "?"], answer, "relation", "binary", anchor=o, target=s)
            else:
                raise ValueError(f"unknown question kind {kind!r}")
    return out


def generate_synthetic(rng: np.random.Generator, world: SyntheticWorld, cfg: SceneConfig, scene_id: int = 0,
                       first_qid: int = 0, kinds=None):
    """One scene and its question set."""
    scene = generate_scene(scene_id, world, cfg, rng)
    kw = {} if kinds is None else {"kinds": kinds}
    return scene, generate_questions(scene, world, cfg, rng, first_qid, **kw)


# --- symbolic oracle ---------------------------------------------------------------------
class UnanswerableError(ValueError):
    pass


def solve(scene: SyntheticScene, tokens: Sequence[str], world: SyntheticWorld) -> str:
    """Answer a templated question by brute force over the scene record."""
    toks = list(tokens)
    by_cat = {world.categories[o.category]: k for k, o in enumerate(scene.objects)}
    rels = set(scene.relations)

    def find(name):
        if name not in by_cat:
            raise UnanswerableError(f"no {name} in scene")
        return by_cat[name]

    if toks[:4] == ["what", "color", "is", "the"] and len(toks) == 6:
        return world.attributes[scene.objects[find(toks[4])].attribute]
    if toks[:3] == ["is", "there", "a"] and len(toks) == 5:
        return "yes" if toks[3] in by_cat else "no"
    if toks[:2] == ["what", "is"] and toks[-3] == "the":
        p = world.predicate_index(toks[2:-3])
        anchor = find(toks[-2])
        subjects = [s for s in range(scene.n_objects) if (s, p, anchor) in rels]
        if len(subjects) != 1:
            raise UnanswerableError(f"{len(subjects)} candidates")
        return world.categories[scene.objects[subjects[0]].category]
    if toks[:2] == ["is", "the"] and toks[-3] == "the":
        subj, obj = find(toks[2]), find(toks[-2])
        p = world.predicate_index(toks[3:-3])
        return "yes" if (subj, p, obj) in rels else "no"
    raise UnanswerableError(f"unrecognised question: {' '.join(toks)}")


# --- datasets ------------------------------------------------------------------------------
@dataclass
class SyntheticDataset:
    world: SyntheticWorld
    scene_cfg: SceneConfig
    scenes: list
    features: list
    questions: list
    splits: dict = field(default_factory=dict)  # scene_id -> "train" | "val"

    def questions_for(self, split: str) -> list:
        return [q for q in self.questions if self.splits[q.scene_id] == split]


def generate_dataset(n_scenes: int, seed: int, world_cfg: WorldConfig = WorldConfig(),
                     scene_cfg: SceneConfig = SceneConfig(), val_fraction: float = 0.2,
                     kinds=None) -> SyntheticDataset:
    world = SyntheticWorld(world_cfg)
    rng = np.random.default_rng(seed)
    scenes, feats, questions, splits = [], [], [], {}
    n_val = int(round(val_fraction * n_scenes))
    for sid in range(n_scenes):
        scene, qs = generate_synthetic(rng, world, scene_cfg, sid, len(questions), kinds)
        scenes.append(scene)
        feats.append(node_features(scene, world, scene_cfg, rng))
        questions.extend(qs)
        splits[sid] = "val" if sid >= n_scenes - n_val else "train"
    return SyntheticDataset(world, scene_cfg, scenes, feats, questions, splits)


def scene_graph(scene: SyntheticScene, features: np.ndarray, world: SyntheticWorld, encoder=None,
                edge_seed: int = 0) -> SceneGraph:
    """Scene graph whose edges come from ``encoder`` on pair maps, or ideal per-predicate vectors."""
    return scene_graphs([scene], [features], world, encoder, edge_seed)[0]


def scene_graphs(scenes, features, world: SyntheticWorld, encoder=None, edge_seed: int = 0,
                 chunk: int = 2048) -> list[SceneGraph]:
    rel_dim = encoder.cfg.embed_dim if encoder is not None else world.cfg.rel_dim
    jobs = []  # (scene index, s, o, maps or predicate)
    for k, scene in enumerate(scenes):
        rng = np.random.default_rng([world.cfg.seed, edge_seed, scene.scene_id])
        for s, p, o in scene.relations:
            maps = world.pair_maps(scene.objects[s].category, scene.objects[o].category, p, rng) if encoder else None
            jobs.append((k, s, o, p, maps))
    vectors = np.zeros((len(jobs), rel_dim))
    if encoder is not None and jobs:
        from .tensor import no_grad
        with no_grad():
            for start in range(0, len(jobs), chunk):
                part = jobs[start:start + chunk]
                x = [np.stack([j[4][m] for j in part]) for m in range(3)]
                vectors[start:start + len(part)] = encoder.encode_relation(*x).data
    else:
        for n, job in enumerate(jobs):
            vectors[n] = world.ideal_edges[job[3]]
    graphs = []
    edges = [np.zeros((sc.n_objects, sc.n_objects, rel_dim)) for sc in scenes]
    known = [np.zeros((sc.n_objects, sc.n_objects), dtype=bool) for sc in scenes]
    for n, (k, s, o, _, _) in enumerate(jobs):
        edges[k][s, o] = vectors[n]
        known[k][s, o] = True
    for k, scene in enumerate(scenes):
        boxes = np.array([ob.box for ob in scene.objects])
        graphs.append(SceneGraph(np.asarray(features[k]), edges[k], known[k], boxes, scene.label_matrix()))
    return graphs


def write_dataset(directory, data: SyntheticDataset) -> None:
    """Write ``meta.json``, ``scenes.jsonl``, ``questions.jsonl`` and SGF1 feature files."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    answers = sorted({q.answer for q in data.questions})
    meta = {"world": asdict(data.world.cfg), "scene": asdict(data.scene_cfg), "answers": answers,
            "predicates": data.world.predicates, "categories": data.world.categories}
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    with open(directory / "scenes.jsonl", "w", encoding="utf-8") as fh:
        for scene, feats in zip(data.scenes, data.features):
            rec = scene.to_json()
            rec["split"] = data.splits[scene.scene_id]
            rec["features"] = f"features/{scene.scene_id:06d}.sgf"
            save_features(directory / rec["features"], feats, np.array([o.box for o in scene.objects]))
            fh.write(json.dumps(rec) + "\n")
    index = {a: i for i, a in enumerate(answers)}
    with open(directory / "questions.jsonl", "w", encoding="utf-8") as fh:
        for q in data.questions:
            rec = asdict(q)
            rec["answer_index"] = index[q.answer]
            fh.write(json.dumps(rec) + "\n")


def read_dataset(directory) -> SyntheticDataset:
    from .graph import load_features

    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    world = SyntheticWorld(WorldConfig(**meta["world"]))
    scene_cfg = SceneConfig(**meta["scene"])
    scenes, feats, splits = [], [], {}
    with open(directory / "scenes.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            scene = SyntheticScene.from_json(rec)
            f, _ = load_features(directory / rec["features"], n_max=scene_cfg.n_max)
            scenes.append(scene)
            feats.append(f)
            splits[scene.scene_id] = rec["split"]
    questions = []
    with open(directory / "questions.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            rec.pop("answer_index", None)
            questions.append(QARecord(**rec))
    return SyntheticDataset(world, scene_cfg, scenes, feats, questions, splits)
