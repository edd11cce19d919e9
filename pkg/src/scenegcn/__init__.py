"""SceneGCN visual relational reasoning on scene graphs, in numpy."""

__version__ = "0.1.0"
