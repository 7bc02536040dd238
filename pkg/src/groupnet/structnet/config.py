"""Architecture description for the decomposed binary networks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from ..errors import ConfigError
from ..quant import QuantSpec

DECOMPOSITIONS = ("direct", "lbd", "gbd-v1", "gbd-v2", "gbd-v3", "gbd", "soft")
BLOCK_KINDS = ("basic", "plain")
TASKS = ("classification", "segmentation")


def bpac_rates(K: int):
    """Per-branch dilation rates for the last and second-to-last blocks.

    Branch ``i`` (0-based) uses rate ``i + 2`` in the last block and
    ``i + 6`` in the one before it.
    """
    if int(K) < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return list(range(2, K + 2)), list(range(6, K + 6))


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    stride: int = 1
    dilation: int = 1
    kind: str = "basic"


@dataclass(frozen=True)
class ArchConfig:
    """Backbone plus decomposition settings.

    ``groups`` is only read for ``decomposition="gbd"``; the ``gbd-v*``
    presets derive their partition from the block count.  The first (stem)
    and last (head) layers always stay full precision.
    """

    blocks: tuple = (
        BlockConfig(16),
        BlockConfig(16),
        BlockConfig(32, stride=2),
        BlockConfig(32),
    )
    in_channels: int = 1
    stem_channels: int = 16
    stem_stride: int = 1
    kernel_size: int = 3
    num_classes: int = 10
    task: str = "classification"
    K: int = 1
    decomposition: str = "direct"
    groups: tuple | None = None
    extra_shortcuts: bool = False
    bpac: bool = False
    bpac_combine: str = "lambda"
    pretrain_nonlinearity: str = "relu"
    quant: QuantSpec = field(default_factory=QuantSpec)

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if isinstance(self.quant, dict):
            object.__setattr__(self, "quant", QuantSpec.from_dict(self.quant))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        errors = self._validate()
        if errors:
            raise ConfigError(errors)

    def _validate(self):
        e = {}
        n = len(self.blocks)
        if n < 1:
            e["arch.blocks"] = "need at least one block"
        for i, b in enumerate(self.blocks):
            if b.channels < 1:
                e[f"arch.blocks[{i}].channels"] = f"must be >= 1, got {b.channels}"
            if b.stride < 1:
                e[f"arch.blocks[{i}].stride"] = f"must be >= 1, got {b.stride}"
            if b.dilation < 1:
                e[f"arch.blocks[{i}].dilation"] = f"must be >= 1, got {b.dilation}"
            if b.kind not in BLOCK_KINDS:
                e[f"arch.blocks[{i}].kind"] = f"must be one of {BLOCK_KINDS}, got {b.kind!r}"
        for name in ("in_channels", "stem_channels", "stem_stride", "num_classes"):
            if getattr(self, name) < 1:
                e[f"arch.{name}"] = f"must be >= 1, got {getattr(self, name)}"
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            e["arch.kernel_size"] = f"must be a positive odd number, got {self.kernel_size}"
        if self.task not in TASKS:
            e["arch.task"] = f"must be one of {TASKS}, got {self.task!r}"
        if self.decomposition not in DECOMPOSITIONS:
            e["arch.decomposition"] = f"must be one of {DECOMPOSITIONS}, got {self.decomposition!r}"
        if self.K < 1:
            e["arch.K"] = f"must be >= 1, got {self.K}"
        elif self.decomposition == "direct" and self.K != 1:
            e["arch.K"] = f"direct binarization uses K=1, got {self.K}"
        if self.decomposition == "gbd-v2" and n % 2:
            e["arch.decomposition"] = f"gbd-v2 pairs blocks; {n} blocks cannot be split into pairs"
        if self.decomposition == "gbd":
            if self.groups is None:
                e["arch.groups"] = "decomposition 'gbd' needs an explicit group partition"
            else:
                flat = [i for g in self.groups for i in g]
                contiguous = all(list(g) == list(range(g[0], g[0] + len(g))) for g in self.groups if g)
                if sorted(flat) != list(range(n)) or flat != sorted(flat) or not contiguous or any(
                    not g for g in self.groups
                ):
                    e["arch.groups"] = (
                        f"groups {self.groups} must split blocks 0..{n - 1} into consecutive, "
                        "disjoint, non-empty runs"
                    )
        if self.extra_shortcuts and any(b.kind != "basic" for b in self.blocks):
            e["arch.extra_shortcuts"] = "per-convolution shortcuts need basic residual blocks"
        if self.bpac and n < 2:
            e["arch.bpac"] = "BPAC assigns rates to the last two blocks; need at least 2 blocks"
        if self.bpac_combine not in ("lambda", "sum"):
            e["arch.bpac_combine"] = f"must be 'lambda' or 'sum', got {self.bpac_combine!r}"
        if self.pretrain_nonlinearity not in ("relu", "tanh"):
            e["arch.pretrain_nonlinearity"] = (
                f"must be 'relu' or 'tanh', got {self.pretrain_nonlinearity!r}"
            )
        return e

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def n_branches(self):
        """Parallel structural branches at block level (LBD branches live inside layers)."""
        return 1 if self.decomposition in ("direct", "lbd") else self.K

    @property
    def layer_branches(self):
        return self.K if self.decomposition == "lbd" else 1

    def partition(self):
        """Resolved block groups for the hard group-wise variants."""
        n = self.n_blocks
        if self.decomposition == "gbd-v2":
            return tuple((i, i + 1) for i in range(0, n, 2))
        if self.decomposition == "gbd-v3":
            return (tuple(range(n)),)
        if self.decomposition == "gbd":
            return self.groups
        return tuple((i,) for i in range(n))

    def branch_rates(self, block_index):
        """Dilation rate used by each block-level or layer-level branch of a block."""
        k = max(self.n_branches, self.layer_branches)
        base = [self.blocks[block_index].dilation] * k
        if not self.bpac:
            return base
        last, second = bpac_rates(k)
        if block_index == self.n_blocks - 1:
            return last
        if block_index == self.n_blocks - 2:
            return second
        return base

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["groups"] = None if self.groups is None else [list(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(BlockConfig(**b) for b in d.get("blocks", ()))
        if "quant" in d and isinstance(d["quant"], dict):
            d["quant"] = QuantSpec.from_dict(d["quant"])
        return cls(**d)
