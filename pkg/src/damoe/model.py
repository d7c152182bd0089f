"""Task models: the expert mixture with an output head, a plain fixed-depth
GNN baseline, and JSON checkpointing."""

import json

import numpy as np

from . import autodiff as ad
from . import layers as gl
from .graphs import (TASK_GRAPH_CLASSIFICATION, TASK_GRAPH_REGRESSION,
                     TASK_LINK_PREDICTION, TASK_NODE_CLASSIFICATION, TASKS)
from .moe import DaMoeBlock, mixture_forward

_NODE_LEVEL_TASKS = (TASK_NODE_CLASSIFICATION, TASK_LINK_PREDICTION)


def task_level(task):
    return "node" if task in _NODE_LEVEL_TASKS else "graph"


def head_width(task, num_classes):
    if task in (TASK_GRAPH_CLASSIFICATION, TASK_NODE_CLASSIFICATION):
        return num_classes
    if task == TASK_GRAPH_REGRESSION:
        return 1
    return None  # link prediction scores pairs of raw embeddings


class DaMoeModel:
    """Mixture block plus a linear head mapping embeddings to predictions."""

    def __init__(self, task, backbone, num_experts, top_k, d_in, hidden, rng,
                 num_classes=None, readout=None, noise_enabled=True,
                 gating_mode="structure", gate_hidden=32):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        readout = readout or ("mean" if backbone == "gcn" else "sum")
        self.task = task
        self.level = task_level(task)
        self.num_classes = num_classes
        self.config = {
            "task": task, "backbone": backbone, "num_experts": num_experts,
            "top_k": top_k, "d_in": d_in, "hidden": hidden,
            "num_classes": num_classes, "readout": readout,
            "noise_enabled": noise_enabled, "gating_mode": gating_mode,
            "gate_hidden": gate_hidden,
        }
        self.block = DaMoeBlock(backbone, num_experts, top_k, d_in, hidden, readout, rng,
                                noise_enabled=noise_enabled, gating_mode=gating_mode,
                                gate_hidden=gate_hidden)
        width = head_width(task, num_classes)
        if width is not None:
            self.head_w = ad.parameter(gl.glorot(rng, hidden, width))
            self.head_b = ad.parameter(np.zeros((1, width)))
        else:
            self.head_w = self.head_b = None

    @property
    def num_experts(self):
        return self.block.gate.num_experts

    @property
    def top_k(self):
        return self.block.gate.top_k

    def parameters(self):
        named = self.block.parameters()
        if self.head_w is not None:
            named += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return named

    def forward(self, g, rng, training=True):
        """Returns a MixtureResult whose output is predictions (or embeddings
        for link prediction)."""
        result = mixture_forward(self.block, g, self.level, rng, training=training)
        if self.head_w is not None:
            result.output = ad.add(ad.matmul(result.output, self.head_w), self.head_b)
        return result


class SingleGnnModel:
    """A fixed-depth GNN with the same head, used as the non-mixture baseline."""

    def __init__(self, task, backbone, depth, d_in, hidden, rng,
                 num_classes=None, readout=None):
        readout = readout or ("mean" if backbone == "gcn" else "sum")
        self.task = task
        self.level = task_level(task)
        self.num_classes = num_classes
        self.depth = depth
        self.config = {
            "task": task, "backbone": backbone, "depth": depth, "d_in": d_in,
            "hidden": hidden, "num_classes": num_classes, "readout": readout,
        }
        self.expert = gl.ExpertGnn(backbone, depth, d_in, hidden, readout, rng)
        width = head_width(task, num_classes)
        if width is not None:
            self.head_w = ad.parameter(gl.glorot(rng, hidden, width))
            self.head_b = ad.parameter(np.zeros((1, width)))
        else:
            self.head_w = self.head_b = None

    def parameters(self):
        named = [(f"expert.{n}", p) for n, p in self.expert.parameters()]
        if self.head_w is not None:
            named += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return named

    def forward(self, g, rng=None, training=True):
        if self.level == "graph":
            out = gl.expert_forward_graph(self.expert, g)
        else:
            out = gl.expert_forward_node(self.expert, g)
        if self.head_w is not None:
            out = ad.add(ad.matmul(out, self.head_w), self.head_b)
        return out


def save_model(model, path):
    """Write config echo plus all parameters as flat arrays to one JSON file."""
    doc = {
        "kind": type(model).__name__,
        "config": model.config,
        "params": {
            name: {"shape": list(node.data.shape), "values": node.data.ravel().tolist()}
            for name, node in model.parameters()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    cfg = doc["config"]
    rng = np.random.default_rng(0)  # shapes only; values are overwritten below
    if doc["kind"] == "SingleGnnModel":
        model = SingleGnnModel(cfg["task"], cfg["backbone"], cfg["depth"], cfg["d_in"],
                               cfg["hidden"], rng, num_classes=cfg["num_classes"],
                               readout=cfg["readout"])
    else:
        model = DaMoeModel(cfg["task"], cfg["backbone"], cfg["num_experts"], cfg["top_k"],
                           cfg["d_in"], cfg["hidden"], rng, num_classes=cfg["num_classes"],
                           readout=cfg["readout"], noise_enabled=cfg["noise_enabled"],
                           gating_mode=cfg["gating_mode"], gate_hidden=cfg["gate_hidden"])
    saved = doc["params"]
    for name, node in model.parameters():
        entry = saved[name]
        node.data = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return model
