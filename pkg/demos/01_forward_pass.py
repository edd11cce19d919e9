"""Build one synthetic scene graph and run an untrained model over a question.

Shows the data model (nodes, directed edges, the unknown-relationship
vector) and the two attention maps the model exposes.  Runs in about a second.

    python demos/01_forward_pass.py
"""

import numpy as np

from scenegcn.model import GraphBatch, ModelConfig, SceneGCN
from scenegcn.synthetic import generate_dataset, scene_graph

data = generate_dataset(n_scenes=1, seed=3)
scene, feats, world = data.scenes[0], data.features[0], data.world
graph = scene_graph(scene, feats, world)

print("objects:")
for k, obj in enumerate(scene.objects):
    print(f"  {k}: {world.attributes[obj.attribute]} {world.categories[obj.category]}")
print(f"{graph.n_nodes} nodes, {graph.n_edges} directed edges, {int(graph.edge_known.sum())} annotated")
for s, p, o in scene.relations:
    print(f"  {s} -[{world.predicates[p]}]-> {o}")

question = next(q for q in data.questions if q.family == "relation")
vocab = world.vocabulary()
print(f"\nquestion: {question.text}   (answer: {question.answer})")

cfg = ModelConfig(d_obj=graph.node_features.shape[1], vocab_size=len(vocab), n_answers=len(world.categories),
                  d=64, d_q=64, rel_dim=graph.rel_dim, mlp_hidden=128, gru_layers=2, q_att=True, dropout=0.0)
model = SceneGCN(cfg, np.random.default_rng(0))
out = model.forward(GraphBatch.from_graphs([graph], [vocab.encode(question.tokens)]))

n = graph.n_nodes
# fresh weights give nearly uniform attention; demos/02 shows a trained model
omega = out.edge_attention.data[0, :n, :n, 0]
print("\nquestion-relation attention, column i is a distribution over i's neighbours j:")
print(np.array2string(omega, precision=5))
print("column sums:", omega.sum(axis=0).round(12))
print("object attention:", out.object_attention.data[0].round(5), "sum", out.object_attention.data[0].sum().round(12))
print("answer scores lie in (0, 1):", out.scores.data.min().round(5), "..", out.scores.data.max().round(5))
