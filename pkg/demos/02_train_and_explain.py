"""Train a small model on relation questions, compare it with the baseline,
and read an attention trace for one held-out question.

Uses the ideal per-predicate edge vectors, so no relation encoder has to be
trained first.  Takes a few minutes on one core.

    python demos/02_train_and_explain.py
"""

import json
import logging

from scenegcn.synthetic import SceneConfig, generate_dataset
from scenegcn.train import (ExperimentConfig, PredicateLabeler, attention_trace, prepare_data, top_edge_links,
                            train)

logging.basicConfig(level=logging.INFO, format="%(message)s")

dataset = generate_dataset(3000, seed=0, scene_cfg=SceneConfig(relation_open=2), kinds=("relation_open",))
common = dict(d=128, d_q=128, mlp_hidden=256, batch_size=64, lr=3e-3, epochs=15, gru_layers=1, q_att=False)
data = prepare_data(dataset, ExperimentConfig(**common))
print(f"{len(data.train)} training / {len(data.val)} validation questions, {len(data.answers)} answers")

states = {}
for variant in ("scenegcn", "baseline"):
    states[variant] = train(ExperimentConfig(variant=variant, **common), data, seed=0)
    print(f"{variant:9s} val accuracy {states[variant].history[-1]['val_accuracy']:.3f}")

model = states["scenegcn"].model
labeler = PredicateLabeler(data.lexicon, ideal=dataset.world.ideal_edges)
q = data.val[0]
trace = attention_trace(model, data.graphs[q.scene_id], q, data, labeler)
print("\nattention trace:")
print(json.dumps({k: trace[k] for k in ("question", "answer", "prediction", "central_object", "top_edges")},
                 indent=1))
print(f"named objects: anchor {q.anchor}, target {q.target}; "
      f"top edge links them: {top_edge_links(trace, q.anchor, q.target)}")
