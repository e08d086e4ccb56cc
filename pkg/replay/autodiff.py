"""
Differentiable tensor primitives for the condensa engine.

Every continuous quantity (frames, prompts, condensing weights, features,
logits) is a float64 torch tensor. The functions here are the only primitives
the rest of the engine differentiates through; each one validates shapes and
domains before delegating to torch so that failures carry the offending
shapes instead of a backend traceback.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .exceptions import ContractError, DimensionError, DomainError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

Number = Union[int, float]


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Create a float64 tensor, optionally tracked by the gradient graph."""
    out = torch.as_tensor(data, dtype=DTYPE).clone()
    out.requires_grad_(requires_grad)
    return out


def _finite_checks_enabled() -> bool:
    from django.conf import settings

    return settings.configured and getattr(settings, 'CONDENSA_CHECK_FINITE', False)


def _checked(out: torch.Tensor, op: str) -> torch.Tensor:
    if _finite_checks_enabled() and not torch.isfinite(out).all():
        raise DomainError(f"{op} produced non-finite values")
    return out


def _require_ndim(x: torch.Tensor, ndims: Sequence[int], op: str, name: str = 'input'):
    if x.dim() not in ndims:
        raise DimensionError(f"{op}: {name} must have {' or '.join(map(str, ndims))} dims", x.shape)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """
    2D cross-correlation over N×C×H×W (or C×H×W) input.

    Args:
        x: Input block
        kernel: O×C×kh×kw filters
        bias: Optional O-vector
        stride: Step between windows (≥ 1)
        pad: Zero padding on every spatial border (≥ 0)
    """
    _require_ndim(x, (3, 4), 'conv2d')
    _require_ndim(kernel, (4,), 'conv2d', 'kernel')
    if stride < 1:
        raise DomainError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise DomainError(f"conv2d: pad must be >= 0, got {pad}")
    if x.shape[-3] != kernel.shape[1]:
        raise DimensionError("conv2d: input channels do not match kernel", x.shape, kernel.shape)
    if bias is not None and tuple(bias.shape) != (kernel.shape[0],):
        raise DimensionError("conv2d: bias must have one entry per output channel", bias.shape, kernel.shape)
    height, width = x.shape[-2] + 2 * pad, x.shape[-1] + 2 * pad
    if height < kernel.shape[2] or width < kernel.shape[3]:
        raise DimensionError("conv2d: kernel larger than padded input", x.shape, kernel.shape)

    unbatched = x.dim() == 3
    out = F.conv2d(x.unsqueeze(0) if unbatched else x, kernel, bias, stride=stride, padding=pad)
    return _checked(out.squeeze(0) if unbatched else out, 'conv2d')


def relu(x: torch.Tensor) -> torch.Tensor:
    return _checked(torch.relu(x), 'relu')


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map x·Wᵀ + b over the last axis; W is out×in."""
    _require_ndim(weight, (2,), 'linear', 'weight')
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError("linear: input features do not match weight", x.shape, weight.shape)
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise DimensionError("linear: bias does not match weight rows", bias.shape, weight.shape)
    return _checked(F.linear(x, weight, bias), 'linear')


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """Mean over the two trailing (spatial) axes."""
    if x.dim() < 2:
        raise DimensionError("global_avg_pool: need at least 2 dims", x.shape)
    return _checked(x.mean(dim=(-2, -1)), 'global_avg_pool')


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if x.dim() == 0:
        raise DimensionError("softmax: scalar input has no axis", x.shape)
    return _checked(torch.softmax(x, dim=axis), 'softmax')


def cross_entropy(logits: torch.Tensor, label) -> torch.Tensor:
    """
    Cross-entropy of logits against integer labels.

    A K-vector with an int label gives the per-sample loss; a B×K block with
    B labels gives the batch mean. Always returns a scalar.
    """
    _require_ndim(logits, (1, 2), 'cross_entropy', 'logits')
    num_classes = logits.shape[-1]
    labels = torch.as_tensor(label, dtype=torch.long)
    expected = () if logits.dim() == 1 else (logits.shape[0],)
    if tuple(labels.shape) != expected:
        raise DimensionError("cross_entropy: labels do not match logits", labels.shape, logits.shape)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"cross_entropy: label out of range [0, {num_classes})")
    if logits.dim() == 1:
        return _checked(F.cross_entropy(logits.unsqueeze(0), labels.unsqueeze(0)), 'cross_entropy')
    return _checked(F.cross_entropy(logits, labels), 'cross_entropy')


def _as_operand(b, like: torch.Tensor) -> torch.Tensor:
    if isinstance(b, torch.Tensor):
        return b
    return torch.full_like(like, float(b))


def mse(a: torch.Tensor, b) -> torch.Tensor:
    """Mean squared error; ``b`` may be a plain number."""
    b = _as_operand(b, a)
    if a.shape != b.shape:
        raise DimensionError("mse: shapes differ", a.shape, b.shape)
    return _checked(((a - b) ** 2).mean(), 'mse')


def squared_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance along the last axis (sum, not mean)."""
    if a.shape != b.shape:
        raise DimensionError("squared_distance: shapes differ", a.shape, b.shape)
    return _checked(((a - b) ** 2).sum(dim=-1), 'squared_distance')


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum; only missing or singleton leading axes broadcast."""
    try:
        shape = torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError("add: shapes do not conform", a.shape, b.shape) from None
    for operand in (a, b):
        trailing = shape[len(shape) - operand.dim():]
        mismatch = [i for i, (got, want) in enumerate(zip(operand.shape, trailing)) if got != want]
        if mismatch and (mismatch != list(range(len(mismatch))) or any(operand.shape[i] != 1 for i in mismatch)):
            raise DimensionError("add: only leading axes may broadcast", a.shape, b.shape)
    return _checked(a + b, 'add')


def scale(a: torch.Tensor, s) -> torch.Tensor:
    return _checked(a * s, 'scale')


def weighted_sum(weights: torch.Tensor, stack: torch.Tensor) -> torch.Tensor:
    """
    Σ_t weights[..., t] · stack[..., t, ...].

    ``weights`` has shape L×T (L leading axes, possibly none) and ``stack``
    shape L×T×rest; the result has shape L×rest.
    """
    lead = weights.dim()
    if lead == 0 or stack.dim() <= lead or tuple(stack.shape[:lead]) != tuple(weights.shape):
        raise DimensionError("weighted_sum: weights must prefix the stack shape", weights.shape, stack.shape)
    w = weights.reshape(*weights.shape, *([1] * (stack.dim() - lead)))
    return _checked((w * stack).sum(dim=lead - 1), 'weighted_sum')


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

@dataclass
class GradGraph:
    """
    Recorded computation behind a scalar root.

    ``nodes`` are torch grad functions in topological order (every node after
    its inputs); ``leaves`` are the tensors whose ``grad`` the backward pass
    populates.
    """

    root: torch.Tensor
    nodes: List[object] = field(default_factory=list)
    leaves: List[torch.Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: torch.Tensor) -> 'GradGraph':
        if root.grad_fn is None:
            leaves = [root] if root.requires_grad else []
            return cls(root=root, nodes=[], leaves=leaves)

        nodes, leaves, seen = [], [], set()
        stack = [(root.grad_fn, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                variable = getattr(node, 'variable', None)
                if variable is not None:
                    leaves.append(variable)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child, _ in reversed(node.next_functions):
                if child is not None and id(child) not in seen:
                    stack.append((child, False))
        return cls(root=root, nodes=nodes, leaves=leaves)


def backward(graph: Union[GradGraph, torch.Tensor], accumulate: bool = False) -> GradGraph:
    """
    Populate ∂root/∂leaf on every requires-grad leaf of the graph.

    Leaf gradients are reset first unless ``accumulate`` is set, in which case
    repeated calls add up.
    """
    if not isinstance(graph, GradGraph):
        graph = GradGraph.trace(graph)
    root = graph.root
    if root.numel() != 1:
        raise ContractError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        raise ContractError("backward: root does not depend on any requires-grad tensor")
    if not accumulate:
        for leaf in graph.leaves:
            leaf.grad = None
    root.backward(retain_graph=True)
    return graph


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class FiniteDifferenceReport:
    max_rel_err: float
    passed: bool
    analytic: torch.Tensor
    numeric: torch.Tensor


def finite_difference_check(
    build: Callable[[], torch.Tensor],
    leaf: torch.Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    scale_floor: float = 1e-4,
) -> FiniteDifferenceReport:
    """
    Compare the analytic gradient of ``build()`` w.r.t. ``leaf`` with central
    differences (f(x+h) − f(x−h)) / 2h.

    Relative error per element is |a − n| / max(|a|, |n|, scale_floor).

    Args:
        build: Deterministic closure returning a scalar that depends on leaf
        leaf: Requires-grad tensor to perturb
        h: Perturbation size (> 0)
        tol: Pass threshold on the largest relative error
        scale_floor: Lower bound of the relative-error denominator
    """
    if h <= 0:
        raise DomainError(f"finite_difference_check: h must be positive, got {h}")
    if not leaf.requires_grad:
        raise ContractError("finite_difference_check: leaf does not require grad")
    if not leaf.is_contiguous():
        raise ContractError("finite_difference_check: leaf must be contiguous")

    value = build()
    again = build()
    if value.numel() != 1:
        raise ContractError(f"finite_difference_check: closure must return a scalar, got {tuple(value.shape)}")
    if value.item() != again.item():
        raise ContractError("finite_difference_check: closure is not deterministic")

    (analytic,) = torch.autograd.grad(value, leaf, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(leaf)
    analytic = analytic.detach().clone()

    numeric = torch.zeros_like(analytic)
    flat_numeric = numeric.view(-1)
    with torch.no_grad():
        flat = leaf.data.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            plus = build().item()
            flat[i] = original - h
            minus = build().item()
            flat[i] = original
            flat_numeric[i] = (plus - minus) / (2 * h)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, scale_floor))
    max_rel_err = float(((analytic - numeric).abs() / denom).max()) if numeric.numel() else 0.0
    passed = max_rel_err <= tol
    if not passed:
        logger.debug(f"Finite-difference check failed: max relative error {max_rel_err:.3e} > {tol:.1e}")
    return FiniteDifferenceReport(max_rel_err=max_rel_err, passed=passed, analytic=analytic, numeric=numeric)
