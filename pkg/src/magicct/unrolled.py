"""Unrolled gradient-descent network with spatial and graph branches.

Each block maps ``x -> x - alpha * A^T (A x - y) + Phi(x) + Psi(x)`` where
``Phi`` is the three-layer CNN and ``Psi`` the two-layer GCN applied to the
patch-node matrix of ``x`` and mapped back by overlap averaging.  Without
the graph branch a block is the plain LEARN update.

The graph over patches is built twice per pass: from the input image for
the first ``n_coarse`` blocks, then once more from the intermediate image
for the remaining blocks.  Gradients treat both graphs as constants.
"""
from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, MagicError
from .geometry import ScanGeometry, back_project, forward_project, normal_operator_norm
from .graphconv import GraphKernels, psi_backward, psi_forward
from .patchgraph import PatchLayout, SparseGraph, accumulate_patches, build_graph, extract_patches
from .spatialconv import SpatialKernels, phi_backward, phi_forward

__all__ = [
    "PatchConfig",
    "BlockParams",
    "MagicNetwork",
    "Tape",
    "learn_block",
    "magic_block",
    "forward_pass",
    "backward_pass",
    "reconstruct",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PatchConfig:
    """Square patches of side ``size`` taken every ``step`` pixels; ``k`` neighbours."""

    size: int = 6
    step: int = 2
    k: int = 8

    def layout(self, image_shape) -> PatchLayout:
        return PatchLayout.create(image_shape, (self.size, self.size), (self.step, self.step))


@dataclass
class BlockParams:
    alpha: float
    spatial: SpatialKernels
    graph: GraphKernels | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "alpha": np.asarray(self.alpha, dtype=np.float64).reshape(()),
            "w1": self.spatial.w1,
            "w2": self.spatial.w2,
            "w3": self.spatial.w3,
        }
        if self.graph is not None:
            out["theta1"] = self.graph.theta1
            out["theta2"] = self.graph.theta2
        return out


@dataclass
class MagicNetwork:
    geometry: ScanGeometry
    blocks: list[BlockParams]
    n_coarse: int
    patch: PatchConfig = field(default_factory=PatchConfig)
    activation: str = "relu"
    use_graph: bool = True
    version: int = 0

    def __post_init__(self):
        n = len(self.blocks)
        if n < 1:
            raise ConfigError("a network needs at least one block")
        if not 1 <= self.n_coarse <= n:
            raise ConfigError(f"coarse block count must satisfy 1 <= N_c <= N_t (N_c={self.n_coarse}, N_t={n})")
        for b in self.blocks:
            if self.use_graph and b.graph is None:
                raise ConfigError("graph branch enabled but a block has no graph kernels")
            if b.graph is not None and b.graph.theta1.shape[0] != self.patch.size**2:
                raise ConfigError("graph kernel input width must equal patch size squared")

    @classmethod
    def init(cls, geometry: ScanGeometry, n_blocks: int = 6, n_coarse: int | None = None,
             channels: int = 48, graph_width: int = 64, patch: PatchConfig | None = None,
             activation: str = "relu", use_graph: bool = True, seed: int = 0,
             theta2_scale: float = 0.0) -> "MagicNetwork":
        """Fresh parameters: kernels uniform in +-1/sqrt(fan_in), step ``1/||A^T A||``.

        The spatial kernels come from the same stream whether or not the
        graph branch is enabled, so a MAGIC network and its LEARN ablation
        start from the same CNNs.  ``theta2`` is scaled by ``theta2_scale``;
        the default 0 makes a new network compute exactly the LEARN update
        until training grows the graph branch.
        """
        patch = patch or PatchConfig()
        if n_coarse is None:
            n_coarse = max(1, n_blocks // 2)
        rng = np.random.default_rng(seed)
        graph_rng = np.random.default_rng([seed, 1])
        alpha = 1.0 / normal_operator_norm(geometry)
        blocks = []
        for _ in range(n_blocks):
            spatial = SpatialKernels.init(channels, rng)
            graph = None
            if use_graph:
                graph = GraphKernels.init(patch.size**2, graph_width, graph_rng)
                graph.theta2 *= theta2_scale
            blocks.append(BlockParams(alpha, spatial, graph))
        return cls(geometry, blocks, n_coarse, patch, activation, use_graph)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def layout(self) -> PatchLayout:
        return self.patch.layout(self.geometry.image_shape)

    def config(self) -> dict:
        b0 = self.blocks[0]
        return {
            "geometry": self.geometry.to_dict(),
            "n_blocks": self.n_blocks,
            "n_coarse": self.n_coarse,
            "patch": dataclasses.asdict(self.patch),
            "activation": self.activation,
            "use_graph": self.use_graph,
            "channels": b0.spatial.channels,
            "graph_width": b0.graph.width if b0.graph is not None else 0,
        }

    def get_params(self) -> dict[str, np.ndarray]:
        """Copies of every learnable tensor, keyed ``"b<t>.<name>"``."""
        out = {}
        for t, b in enumerate(self.blocks):
            for name, arr in b.arrays().items():
                out[f"b{t}.{name}"] = np.array(arr, dtype=np.float64, copy=True)
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for t, b in enumerate(self.blocks):
            b.alpha = float(params[f"b{t}.alpha"])
            b.spatial = SpatialKernels(params[f"b{t}.w1"].copy(), params[f"b{t}.w2"].copy(),
                                       params[f"b{t}.w3"].copy())
            if b.graph is not None:
                b.graph = GraphKernels(params[f"b{t}.theta1"].copy(), params[f"b{t}.theta2"].copy())
        self.version += 1


# --------------------------------------------------------------------------
# blocks

def _fidelity_gradient(x, y, geom):
    return back_project(forward_project(x, geom) - y, geom)


def learn_block(x, y, geom: ScanGeometry, p: BlockParams, act: str = "relu") -> np.ndarray:
    """``x - alpha A^T(Ax - y) + Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    phi, _ = phi_forward(x, p.spatial, act)
    return x - p.alpha * _fidelity_gradient(x, y, geom) + phi


def _check_graph(graph: SparseGraph, layout: PatchLayout):
    if graph.n_nodes != layout.n_nodes:
        raise ConfigError(f"graph has {graph.n_nodes} nodes but the patch layout has {layout.n_nodes}")


def magic_block(x, y, geom: ScanGeometry, graph: SparseGraph, p: BlockParams,
                layout: PatchLayout, act: str = "relu") -> np.ndarray:
    """LEARN update plus the graph branch mapped back to the image grid."""
    _check_graph(graph, layout)
    x = np.asarray(x, dtype=np.float64)
    phi, _ = phi_forward(x, p.spatial, act)
    nodes, _ = extract_patches(x, layout=layout)
    psi, _ = psi_forward(nodes, graph.propagation, p.graph, act)
    return x - p.alpha * _fidelity_gradient(x, y, geom) + phi + _unpatch(psi, layout)


def _unpatch(Z, layout):
    return accumulate_patches(Z, layout) / layout.overlap_counts


def _unpatch_adjoint(g, layout):
    return extract_patches(g / layout.overlap_counts, layout=layout)[0]


@dataclass
class _BlockCache:
    x: np.ndarray
    fid: np.ndarray
    phi: tuple
    psi: tuple | None
    graph: SparseGraph | None


@dataclass
class Tape:
    """Intermediates recorded by :func:`forward_pass` for the reverse sweep."""

    blocks: list[_BlockCache]
    graphs: list[SparseGraph]
    y: np.ndarray
    version: int
    graph_builds: int = 0
    network_id: int = 0


def _block_forward(x, y, geom, p: BlockParams, graph, layout, act):
    fid = _fidelity_gradient(x, y, geom)
    phi, phi_cache = phi_forward(x, p.spatial, act)
    out = x - p.alpha * fid + phi
    psi_cache = None
    if graph is not None:
        nodes, _ = extract_patches(x, layout=layout)
        psi, psi_cache = psi_forward(nodes, graph.propagation, p.graph, act)
        out = out + _unpatch(psi, layout)
    return out, _BlockCache(x, fid, phi_cache, psi_cache, graph)


def _block_backward(cache: _BlockCache, gout, geom, p: BlockParams, layout, act):
    grads = {"alpha": np.asarray(-np.vdot(gout, cache.fid))}
    gx = gout - p.alpha * back_project(forward_project(gout, geom), geom)
    g_phi_x, (gw1, gw2, gw3) = phi_backward(cache.phi, p.spatial, gout, act)
    gx = gx + g_phi_x
    grads.update(w1=gw1, w2=gw2, w3=gw3)
    if cache.psi is not None:
        g_nodes_out = _unpatch_adjoint(gout, layout)
        g_nodes, (gt1, gt2) = psi_backward(cache.psi, cache.graph.propagation, p.graph, g_nodes_out, act)
        gx = gx + accumulate_patches(g_nodes, layout)
        grads.update(theta1=gt1, theta2=gt2)
    return gx, grads


def _make_graph(img, net: MagicNetwork) -> SparseGraph:
    nodes, _ = extract_patches(img, layout=net.layout)
    return build_graph(nodes, net.patch.k)


def forward_pass(net: MagicNetwork, x0, y, graphs: list[SparseGraph] | None = None):
    """Run every block; returns ``(final image, tape)``.

    ``graphs`` may supply the coarse and fine graphs instead of building
    them (used to hold the graphs fixed for finite-difference checks).
    """
    geom = net.geometry
    x = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != geom.image_shape or y.shape != geom.sino_shape:
        raise InputError(f"expected image {geom.image_shape} and sinogram {geom.sino_shape}, "
                         f"got {x.shape} and {y.shape}")
    layout = net.layout if net.use_graph else None
    tape = Tape([], [], y, net.version, network_id=id(net))
    graph = None
    for t, p in enumerate(net.blocks):
        if net.use_graph and t in (0, net.n_coarse):
            stage = 0 if t == 0 else 1
            if graphs is not None:
                graph = graphs[stage]
            else:
                graph = _make_graph(x, net)
                tape.graph_builds += 1
            tape.graphs.append(graph)
        x, cache = _block_forward(x, y, geom, p, graph, layout, net.activation)
        tape.blocks.append(cache)
    return x, tape


def backward_pass(net: MagicNetwork, tape: Tape, loss_grad) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every parameter.

    ``loss_grad`` is the derivative of the loss with respect to the final
    image.  Keys match :meth:`MagicNetwork.get_params`.
    """
    if tape.network_id != id(net) or tape.version != net.version or len(tape.blocks) != net.n_blocks:
        raise MagicError("stale tape: network parameters changed since the forward pass")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != net.geometry.image_shape:
        raise InputError(f"loss gradient has shape {g.shape}, expected {net.geometry.image_shape}")
    layout = net.layout if net.use_graph else None
    grads = {}
    for t in range(net.n_blocks - 1, -1, -1):
        g, block_grads = _block_backward(tape.blocks[t], g, net.geometry, net.blocks[t],
                                         layout, net.activation)
        for name, value in block_grads.items():
            grads[f"b{t}.{name}"] = value
    return grads


def reconstruct(net: MagicNetwork, x0, y) -> np.ndarray:
    return forward_pass(net, x0, y)[0]


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(net: MagicNetwork, path, metadata: dict | None = None) -> Path:
    """Write ``path`` (npz container) and ``path + '.json'`` (metadata sidecar)."""
    path = Path(path)
    arrays = net.get_params()
    header = {"format_version": CHECKPOINT_VERSION, "config": net.config(),
              "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    # fixed member timestamps keep identical networks byte-identical on disk
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.array(arrays[name], order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    path.write_bytes(buf.getvalue())
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(metadata or {}, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_checkpoint(path) -> MagicNetwork:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(bytes(data["__header__"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}", 0) from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}", 0)
    cfg = header["config"]
    geom = ScanGeometry.from_dict(cfg["geometry"])
    params = {k: data[k] for k in header["shapes"]}
    for k, shape in header["shapes"].items():
        if list(params[k].shape) != shape:
            raise FormatError(f"tensor {k} has shape {params[k].shape}, header says {shape}", 0)
    blocks = []
    for t in range(cfg["n_blocks"]):
        spatial = SpatialKernels(params[f"b{t}.w1"], params[f"b{t}.w2"], params[f"b{t}.w3"])
        graph = None
        if f"b{t}.theta1" in params:
            graph = GraphKernels(params[f"b{t}.theta1"], params[f"b{t}.theta2"])
        blocks.append(BlockParams(float(params[f"b{t}.alpha"]), spatial, graph))
    return MagicNetwork(geom, blocks, cfg["n_coarse"], PatchConfig(**cfg["patch"]),
                        cfg["activation"], cfg["use_graph"])
