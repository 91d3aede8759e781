import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from codenet.graph import LayerNode, NetworkGraph, quantize_graph
from codenet.tensor import FloatTensor, Shape4


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def make_tiny_graph(seed: int = 0, resolution: int = 16, channels: int = 8,
                    classes: int = 2, deform: bool = False) -> NetworkGraph:
    """Minimal valid network: stem, a pointwise/depthwise pair, three heads."""
    rng = np.random.default_rng(seed)
    c = channels
    nodes = [
        LayerNode("stem", "full3x3_first", ("input",), ic=3, oc=c, stride=4, relu=True,
                  w_fp=_he(rng, (3, 3, 3, c), 27), b_fp=np.zeros(c, dtype=np.float32)),
        LayerNode("pw", "conv1x1", ("stem",), ic=c, oc=c, relu=True,
                  w_fp=_he(rng, (c, 1, 1, c), c), b_fp=np.zeros(c, dtype=np.float32)),
    ]
    if deform:
        nodes.append(LayerNode(
            "dw", "dw3x3_deform", ("pw",), ic=c, oc=c, relu=False,
            w_fp=_he(rng, (1, 3, 3, c), 9), b_fp=np.zeros(c, dtype=np.float32),
            off_w_fp=_he(rng, (c, 1, 1, 18), c), off_b_fp=np.zeros(18, dtype=np.float32)))
    else:
        nodes.append(LayerNode("dw", "dw3x3", ("pw",), ic=c, oc=c, stride=1, relu=False,
                               w_fp=_he(rng, (1, 3, 3, c), 9), b_fp=np.zeros(c, dtype=np.float32)))
    for name, oc in (("head_y", classes), ("head_s", 2), ("head_o", 2)):
        nodes.append(LayerNode(name, "conv1x1", ("dw",), ic=c, oc=oc, relu=False,
                               w_fp=_he(rng, (c, 1, 1, oc), c), b_fp=np.zeros(oc, dtype=np.float32)))
    g = NetworkGraph(nodes, config="a", resolution=resolution, width_mult=1,
                     downsample="stride4", classes=classes)
    g.lint()
    return g


def make_calib_images(resolution: int, count: int = 2, seed: int = 5) -> list[FloatTensor]:
    rng = np.random.default_rng(seed)
    return [FloatTensor(Shape4(1, resolution, resolution, 3),
                        rng.uniform(0, 1, size=(1, resolution, resolution, 3)).astype(np.float32))
            for _ in range(count)]


@pytest.fixture
def tiny_quantized():
    g = make_tiny_graph(seed=1)
    return quantize_graph(g, make_calib_images(16))
