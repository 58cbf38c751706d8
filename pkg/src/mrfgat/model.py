"""
SRFGAT attention layer, multi-scale concatenation and the MRFGAT classifier.

Per scale, with e_ij the edge vectors and p_ij the neighbor coordinates of
the scale's kNN graph::

    e'_ij = h_e(e_ij)                 p'_ij = h_p(p_ij)
    a_ij  = LeakyReLU(g_a(e'_ij))     b_ij  = LeakyReLU(g_b(e_ij))
    alpha = softmax_j(a_ij)           beta  = softmax_j(b_ij)
    context_i    = ReLU( sum_j alpha_ij e'_ij || sum_j beta_ij p'_ij )
    edge_local_i = max_j e'_ij

h is affine + ReLU (affine + BN + ReLU with ``attention_batch_norm``) and g
is a pure affine map to one channel.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    LEAKY_RELU_SLOPE,
    MODES,
    BatchNormState,
    Mode,
    Parameter,
    Tensor,
    as_tensor,
    batch_norm,
    concat_last,
    dropout,
    leaky_relu,
    linear,
    reduce_max_axis,
    reduce_sum_axis,
    relu,
    reshape,
    softmax_last,
)
from .errors import ContractError, DimensionError, ValidationError
from .geometry import NeighborGraph, PointCloud, knn_graph_indexed

KnnBackend = Callable[[PointCloud, int], NeighborGraph]


@dataclass
class MRFGATConfig:
    """Architectural hyperparameters. Defaults are the ModelNet40 network."""

    neighbors: Tuple[int, ...] = (8, 16, 24, 32)
    channels: Tuple[int, ...] = (8, 16, 16, 24)
    shared_mlp: Tuple[int, ...] = (128, 64, 64, 64)
    global_width: int = 1024
    head: Tuple[int, ...] = (512, 256)
    num_classes: int = 40
    leaky_slope: float = LEAKY_RELU_SLOPE
    keep_prob: float = 0.5
    attention_batch_norm: bool = False
    edge_branch: bool = True
    share_transform: bool = False

    def __post_init__(self) -> None:
        self.neighbors = tuple(int(k) for k in self.neighbors)
        self.channels = tuple(int(c) for c in self.channels)
        self.shared_mlp = tuple(int(w) for w in self.shared_mlp)
        self.head = tuple(int(w) for w in self.head)
        if not self.neighbors:
            raise ValidationError("at least one scale is required")
        if len(self.neighbors) != len(self.channels):
            raise ValidationError(
                f"neighbors {self.neighbors} and channels {self.channels} must have the same length"
            )
        if not self.shared_mlp:
            raise ValidationError("at least one shared MLP layer is required")
        for label, values in (
            ("neighbors", self.neighbors),
            ("channels", self.channels),
            ("shared_mlp", self.shared_mlp),
            ("head", self.head),
            ("global_width", (self.global_width,)),
            ("num_classes", (self.num_classes,)),
        ):
            if any(value < 1 for value in values):
                raise ValidationError(f"{label} entries must be positive, got {values}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValidationError(f"leaky slope must lie in (0, 1), got {self.leaky_slope}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValidationError(f"keep probability must lie in (0, 1], got {self.keep_prob}")

    @property
    def num_scales(self) -> int:
        return len(self.neighbors)

    @property
    def max_neighbors(self) -> int:
        return max(self.neighbors)

    @property
    def context_width(self) -> int:
        return 2 * sum(self.channels)

    @property
    def edge_width(self) -> int:
        return sum(self.channels) if self.edge_branch else 0

    @property
    def concat_width(self) -> int:
        return sum(self.shared_mlp) + self.edge_width

    def width_schedule(self) -> Dict[str, int]:
        """Feature width after every stage of the network, in order."""
        schedule = {"context": self.context_width}
        for index, width in enumerate(self.shared_mlp):
            schedule[f"shared{index}"] = width
        schedule["concat"] = self.concat_width
        schedule["global"] = self.global_width
        for index, width in enumerate(self.head):
            schedule[f"head{index}"] = width
        schedule["logits"] = self.num_classes
        return schedule


@dataclass
class Affine:
    weight: Parameter
    bias: Parameter

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


@dataclass
class BatchNormLayer:
    name: str
    gamma: Parameter
    beta: Parameter
    state: BatchNormState

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode)

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]


@dataclass
class DenseBlock:
    """Shared per-position layer: affine, batch norm, ReLU."""

    affine: Affine
    norm: BatchNormLayer

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return relu(self.norm(self.affine(x), mode))

    def parameters(self) -> List[Parameter]:
        return self.affine.parameters() + self.norm.parameters()


@dataclass
class SRFGATParams:
    """Learnable maps of one receptive-field scale with ``k`` neighbors."""

    k: int
    edge_transform: Affine
    neighbor_transform: Affine
    edge_scorer: Affine
    raw_edge_scorer: Affine
    edge_norm: Optional[BatchNormLayer] = None
    neighbor_norm: Optional[BatchNormLayer] = None
    leaky_slope: float = LEAKY_RELU_SLOPE

    def __post_init__(self) -> None:
        if self.edge_transform.out_width != self.neighbor_transform.out_width:
            raise DimensionError(
                f"edge transform width {self.edge_transform.out_width} differs from "
                f"neighbor transform width {self.neighbor_transform.out_width}"
            )

    @property
    def channels(self) -> int:
        return self.edge_transform.out_width

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for part in (
            self.edge_transform,
            self.neighbor_transform,
            self.edge_scorer,
            self.raw_edge_scorer,
            self.edge_norm,
            self.neighbor_norm,
        ):
            if part is None:
                continue
            params.extend(p for p in part.parameters() if all(p is not q for q in params))
        return params

    def norms(self) -> List[BatchNormLayer]:
        norms = [norm for norm in (self.edge_norm, self.neighbor_norm) if norm is not None]
        return [norm for i, norm in enumerate(norms) if all(norm is not o for o in norms[:i])]


@dataclass
class NetworkParams:
    scales: List[SRFGATParams]
    shared: List[DenseBlock]
    global_block: DenseBlock
    head: List[DenseBlock]
    classifier: Affine

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for scale in self.scales:
            params.extend(scale.parameters())
        for block in [*self.shared, self.global_block, *self.head]:
            params.extend(block.parameters())
        params.extend(self.classifier.parameters())
        return params

    def norms(self) -> List[BatchNormLayer]:
        norms: List[BatchNormLayer] = []
        for scale in self.scales:
            norms.extend(scale.norms())
        norms.extend(block.norm for block in [*self.shared, self.global_block, *self.head])
        return norms

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def parameter_norms(self) -> Dict[str, float]:
        return {param.name: float(np.linalg.norm(param.data)) for param in self.parameters()}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every learnable value and running statistic, keyed by a stable name."""
        arrays = {param.name: param.data for param in self.parameters()}
        for norm in self.norms():
            arrays[f"{norm.name}.running_mean"] = norm.state.running_mean
            arrays[f"{norm.name}.running_var"] = norm.state.running_var
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        unexpected = sorted(set(arrays) - set(expected))
        if missing or unexpected:
            raise ContractError(
                f"state does not match the network: missing {missing}, unexpected {unexpected}"
            )
        for name, current in expected.items():
            if arrays[name].shape != current.shape:
                raise DimensionError(
                    f"{name}: stored shape {arrays[name].shape} != network shape {current.shape}"
                )
        for param in self.parameters():
            param.data = np.array(arrays[param.name], dtype=np.float64)
            param.zero_grad()
        for norm in self.norms():
            norm.state.running_mean = np.array(arrays[f"{norm.name}.running_mean"], dtype=np.float64)
            norm.state.running_var = np.array(arrays[f"{norm.name}.running_var"], dtype=np.float64)


class SRFGATOutput(NamedTuple):
    context: Tensor
    edge_local: Tensor
    alpha: Tensor
    beta: Tensor


def _affine(name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Affine:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Affine(
        weight=Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.weight"),
        bias=Parameter(np.zeros(fan_out), f"{name}.bias"),
    )


def _norm(name: str, channels: int) -> BatchNormLayer:
    return BatchNormLayer(
        name=name,
        gamma=Parameter(np.ones(channels), f"{name}.gamma"),
        beta=Parameter(np.zeros(channels), f"{name}.beta"),
        state=BatchNormState.fresh(channels),
    )


def _dense(name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> DenseBlock:
    return DenseBlock(affine=_affine(f"{name}.affine", fan_in, fan_out, rng), norm=_norm(f"{name}.norm", fan_out))


def param_init(config: MRFGATConfig, rng: np.random.Generator) -> NetworkParams:
    """
    Fresh parameters: affine weights uniform in +-sqrt(6/(fan_in+fan_out)),
    zero biases, batch-norm scale 1 and shift 0. Draw order is fixed, so a
    seed determines every value.
    """
    scales = []
    for index, (k, width) in enumerate(zip(config.neighbors, config.channels)):
        prefix = f"scale{index}"
        edge_transform = _affine(f"{prefix}.edge_transform", 3, width, rng)
        if config.share_transform:
            neighbor_transform = edge_transform
        else:
            neighbor_transform = _affine(f"{prefix}.neighbor_transform", 3, width, rng)
        edge_norm = neighbor_norm = None
        if config.attention_batch_norm:
            edge_norm = _norm(f"{prefix}.edge_norm", width)
            neighbor_norm = edge_norm if config.share_transform else _norm(f"{prefix}.neighbor_norm", width)
        scales.append(
            SRFGATParams(
                k=k,
                edge_transform=edge_transform,
                neighbor_transform=neighbor_transform,
                edge_scorer=_affine(f"{prefix}.edge_scorer", width, 1, rng),
                raw_edge_scorer=_affine(f"{prefix}.raw_edge_scorer", 3, 1, rng),
                edge_norm=edge_norm,
                neighbor_norm=neighbor_norm,
                leaky_slope=config.leaky_slope,
            )
        )

    shared = []
    width = config.context_width
    for index, out_width in enumerate(config.shared_mlp):
        shared.append(_dense(f"shared{index}", width, out_width, rng))
        width = out_width
    global_block = _dense("global", config.concat_width, config.global_width, rng)
    head = []
    width = config.global_width
    for index, out_width in enumerate(config.head):
        head.append(_dense(f"head{index}", width, out_width, rng))
        width = out_width
    classifier = _affine("classifier", width, config.num_classes, rng)
    return NetworkParams(
        scales=scales,
        shared=shared,
        global_block=global_block,
        head=head,
        classifier=classifier,
    )


def param_count(config: MRFGATConfig) -> int:
    """Scalar learnable parameters (affine weights and biases, BN scale and shift)."""
    total = 0
    for width in config.channels:
        transforms = 1 if config.share_transform else 2
        total += transforms * (3 * width + width)
        if config.attention_batch_norm:
            total += transforms * 2 * width
        total += width + 1
        total += 3 + 1
    width = config.context_width
    for out_width in config.shared_mlp:
        total += width * out_width + out_width + 2 * out_width
        width = out_width
    total += config.concat_width * config.global_width + 3 * config.global_width
    width = config.global_width
    for out_width in config.head:
        total += width * out_width + out_width + 2 * out_width
        width = out_width
    total += width * config.num_classes + config.num_classes
    return total


def _transform(
    x: Tensor,
    affine: Affine,
    norm: Optional[BatchNormLayer],
    mode: Mode,
) -> Tensor:
    y = affine(x)
    if norm is not None:
        y = norm(y, mode)
    return relu(y)


def _drop_last_axis(x: Tensor) -> Tensor:
    return reshape(x, x.shape[:-1])


def _add_last_axis(x: Tensor) -> Tensor:
    return reshape(x, x.shape + (1,))


def srfgat_forward_batch(
    points: np.ndarray,
    graphs: Sequence[NeighborGraph],
    params: SRFGATParams,
    mode: Mode = "infer",
) -> SRFGATOutput:
    """One SRFGAT scale over a batch ``points[B, N, 3]`` with one graph per cloud."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[2] != 3:
        raise DimensionError(f"points must be B x N x 3, got shape {points.shape}")
    if len(graphs) != points.shape[0]:
        raise DimensionError(f"{len(graphs)} graphs for a batch of {points.shape[0]} clouds")
    for graph in graphs:
        if graph.k != params.k:
            raise ContractError(f"graph has k={graph.k} but this scale expects k={params.k}")
        if graph.num_points != points.shape[1]:
            raise DimensionError(
                f"graph over {graph.num_points} points used with clouds of {points.shape[1]}"
            )

    edges = as_tensor(np.stack([graph.edges for graph in graphs]))
    neighbors = as_tensor(
        np.stack([graph.neighbor_points(cloud) for graph, cloud in zip(graphs, points)])
    )
    edge_features = _transform(edges, params.edge_transform, params.edge_norm, mode)
    neighbor_features = _transform(neighbors, params.neighbor_transform, params.neighbor_norm, mode)

    edge_scores = leaky_relu(params.edge_scorer(edge_features), params.leaky_slope)
    raw_scores = leaky_relu(params.raw_edge_scorer(edges), params.leaky_slope)
    alpha = softmax_last(_drop_last_axis(edge_scores))
    beta = softmax_last(_drop_last_axis(raw_scores))

    edge_context = reduce_sum_axis(_add_last_axis(alpha) * edge_features, axis=-2)
    neighbor_context = reduce_sum_axis(_add_last_axis(beta) * neighbor_features, axis=-2)
    context = relu(concat_last([edge_context, neighbor_context]))
    edge_local = reduce_max_axis(edge_features, axis=-2)
    return SRFGATOutput(context=context, edge_local=edge_local, alpha=alpha, beta=beta)


def srfgat_forward(
    pc: PointCloud,
    graph: NeighborGraph,
    params: SRFGATParams,
    mode: Mode = "infer",
) -> SRFGATOutput:
    """One SRFGAT scale over a single cloud: context ``[N, 2F']``, edge_local ``[N, F']``."""
    batched = srfgat_forward_batch(pc.points[None], [graph], params, mode)
    return SRFGATOutput(*(reshape(t, t.shape[1:]) for t in batched))


def mrfgat_concat(per_scale_contexts: Sequence[Tensor]) -> Tensor:
    """Channel concatenation of the per-scale contexts, in scale order."""
    if not per_scale_contexts:
        raise DimensionError("no per-scale contexts to concatenate")
    return concat_last(per_scale_contexts)


def build_graphs(
    points: np.ndarray,
    k: int,
    knn: KnnBackend = knn_graph_indexed,
) -> List[NeighborGraph]:
    """One ``k``-neighbor graph per cloud of ``points[B, N, 3]``."""
    return [knn(PointCloud(cloud), k) for cloud in points]


def check_compatible(params: NetworkParams, config: MRFGATConfig) -> None:
    """Raise :class:`ContractError` unless ``params`` were built for ``config``."""
    problems = []
    if len(params.scales) != config.num_scales:
        problems.append(f"{len(params.scales)} scales vs {config.num_scales} configured")
    else:
        for index, (scale, k, width) in enumerate(zip(params.scales, config.neighbors, config.channels)):
            if scale.k != k or scale.channels != width:
                problems.append(
                    f"scale {index} has k={scale.k}, F'={scale.channels}; configured k={k}, F'={width}"
                )
    if tuple(block.affine.out_width for block in params.shared) != config.shared_mlp:
        problems.append("shared MLP widths differ")
    if params.global_block.affine.in_width != config.concat_width:
        problems.append(
            f"global layer takes {params.global_block.affine.in_width} channels, "
            f"configured concat width is {config.concat_width}"
        )
    if params.global_block.affine.out_width != config.global_width:
        problems.append("global width differs")
    if tuple(block.affine.out_width for block in params.head) != config.head:
        problems.append("head widths differ")
    if params.classifier.out_width != config.num_classes:
        problems.append(
            f"classifier emits {params.classifier.out_width} classes, configured {config.num_classes}"
        )
    if problems:
        raise ContractError("parameters do not match the configuration: " + "; ".join(problems))


def mrfgat_forward_batch(
    points: np.ndarray,
    params: NetworkParams,
    config: MRFGATConfig,
    mode: Mode = "infer",
    rng: Optional[np.random.Generator] = None,
    knn: KnnBackend = knn_graph_indexed,
    widths: Optional[Dict[str, int]] = None,
) -> Tensor:
    """
    Class scores ``[B, c]`` for a batch of normalised clouds ``points[B, N, 3]``.

    Batch-norm statistics span the whole batch in ``train`` mode, and
    dropout between head layers draws its masks from ``rng``. When
    ``widths`` is given it receives the feature width after every stage.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[2] != 3:
        raise DimensionError(f"points must be B x N x 3, got shape {points.shape}")
    check_compatible(params, config)
    if points.shape[1] < config.max_neighbors:
        raise ValidationError(
            f"clouds have {points.shape[1]} points, fewer than the largest neighbor count "
            f"{config.max_neighbors}"
        )
    if mode == "train" and config.keep_prob < 1.0 and rng is None:
        raise ContractError("train mode with dropout needs a random generator")

    graphs = build_graphs(points, config.max_neighbors, knn)
    contexts, edge_locals = [], []
    for scale in params.scales:
        out = srfgat_forward_batch(points, [graph.truncate(scale.k) for graph in graphs], scale, mode)
        contexts.append(out.context)
        edge_locals.append(out.edge_local)

    x = mrfgat_concat(contexts)
    trace = {"context": x.shape[-1]}
    skips = []
    for index, block in enumerate(params.shared):
        x = block(x, mode)
        trace[f"shared{index}"] = x.shape[-1]
        skips.append(x)
    if config.edge_branch:
        skips.extend(edge_locals)
    features = concat_last(skips)
    trace["concat"] = features.shape[-1]
    features = params.global_block(features, mode)
    trace["global"] = features.shape[-1]

    pooled = reduce_max_axis(features, axis=1)
    for index, block in enumerate(params.head):
        pooled = block(pooled, mode)
        trace[f"head{index}"] = pooled.shape[-1]
        if mode == "train":
            pooled = dropout(pooled, config.keep_prob, rng)
    logits = params.classifier(pooled)
    trace["logits"] = logits.shape[-1]
    if widths is not None:
        widths.update(trace)
    return logits


def mrfgat_forward(
    pc: PointCloud,
    params: NetworkParams,
    config: MRFGATConfig,
    mode: Mode = "infer",
    rng: Optional[np.random.Generator] = None,
    knn: KnnBackend = knn_graph_indexed,
) -> Tensor:
    """Class scores ``[c]`` for one normalised cloud."""
    logits = mrfgat_forward_batch(pc.points[None], params, config, mode, rng=rng, knn=knn)
    return reshape(logits, (config.num_classes,))
