"""Named parameter arrays with Adam moments, and the binary checkpoint format."""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, Mapping, Tuple, Union

import numpy as np

from pimbrl_lab.errors import NumericBlowupError, ShapeMismatchError

CHECKPOINT_MAGIC = b"PIMBRLCK"
CHECKPOINT_VERSION = 1

_FIRST_MOMENT_SUFFIX = "#m"
_SECOND_MOMENT_SUFFIX = "#v"
_STEP_SUFFIX = "#step"


@dataclass
class ParameterSet:
    """
    Flat collection of named float64 arrays for one network.

    Shapes are fixed at construction. The Adam moments mirror the parameter shapes,
    and ``step`` counts applied optimizer updates.
    """

    arrays: Dict[str, np.ndarray]
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self) -> None:
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in self.arrays.items()}
        for moments in (self.first_moment, self.second_moment):
            for name, value in self.arrays.items():
                moments.setdefault(name, np.zeros_like(value))
        self.assert_finite()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: value.shape for name, value in self.arrays.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            first_moment={k: v.copy() for k, v in self.first_moment.items()},
            second_moment={k: v.copy() for k, v in self.second_moment.items()},
            step=self.step,
        )

    def check_compatible(self, other: Union["ParameterSet", Mapping[str, np.ndarray]]) -> None:
        """Raise ShapeMismatchError unless ``other`` has exactly our names and shapes."""
        other_arrays = other.arrays if isinstance(other, ParameterSet) else other
        if set(other_arrays) != set(self.arrays):
            missing = sorted(set(self.arrays) ^ set(other_arrays))
            raise ShapeMismatchError(f"Parameter names differ: {missing}")
        for name, value in self.arrays.items():
            if np.shape(other_arrays[name]) != value.shape:
                raise ShapeMismatchError(
                    f"Shape of '{name}' is {np.shape(other_arrays[name])}, expected {value.shape}"
                )

    def assign(self, other: "ParameterSet") -> None:
        """Copy values (not moments) from ``other`` in place."""
        self.check_compatible(other)
        for name in self.arrays:
            self.arrays[name][...] = other.arrays[name]

    def assert_finite(self) -> None:
        for name, value in self.arrays.items():
            if not np.all(np.isfinite(value)):
                raise NumericBlowupError(f"Parameter '{name}' holds non-finite values")

    def distance(self, other: "ParameterSet") -> float:
        """Euclidean distance between two compatible parameter sets."""
        self.check_compatible(other)
        return float(
            np.sqrt(sum(np.sum((self.arrays[k] - other.arrays[k]) ** 2) for k in self.arrays))
        )


# checkpoint format: magic, version, counter table, then named-array table


def _write_name(stream: BinaryIO, name: str) -> None:
    encoded = name.encode("utf-8")
    stream.write(struct.pack("<H", len(encoded)))
    stream.write(encoded)


def _read_name(stream: BinaryIO) -> str:
    (length,) = struct.unpack("<H", stream.read(2))
    return stream.read(length).decode("utf-8")


def save_checkpoint(
    path: Union[str, Path],
    parameter_sets: Mapping[str, ParameterSet],
    counters: Mapping[str, int] = (),
) -> None:
    """
    Write parameter sets (values, moments, step counters) to one checkpoint file.

    Layout: ``PIMBRLCK``, u32 version, u32 counter count, (name, i64) counters,
    u32 array count, then per array: name, u8 ndim, u64 dims, little-endian f64 data.
    """
    all_counters: Dict[str, int] = dict(counters)
    arrays: Dict[str, np.ndarray] = {}
    for prefix, params in parameter_sets.items():
        all_counters[f"{prefix}{_STEP_SUFFIX}"] = params.step
        for name in params:
            arrays[f"{prefix}/{name}"] = params.arrays[name]
            arrays[f"{prefix}/{name}{_FIRST_MOMENT_SUFFIX}"] = params.first_moment[name]
            arrays[f"{prefix}/{name}{_SECOND_MOMENT_SUFFIX}"] = params.second_moment[name]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        stream.write(struct.pack("<I", CHECKPOINT_VERSION))
        stream.write(struct.pack("<I", len(all_counters)))
        for name in sorted(all_counters):
            _write_name(stream, name)
            stream.write(struct.pack("<q", int(all_counters[name])))
        stream.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            value = np.ascontiguousarray(arrays[name], dtype="<f8")
            _write_name(stream, name)
            stream.write(struct.pack("<B", value.ndim))
            stream.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            stream.write(value.tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, ParameterSet], Dict[str, int]]:
    """Read a checkpoint written by ``save_checkpoint``; returns (parameter sets, counters)."""
    with Path(path).open("rb") as stream:
        if stream.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a PiMBRL checkpoint")
        (version,) = struct.unpack("<I", stream.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {version}")

        counters: Dict[str, int] = {}
        (n_counters,) = struct.unpack("<I", stream.read(4))
        for _ in range(n_counters):
            name = _read_name(stream)
            (counters[name],) = struct.unpack("<q", stream.read(8))

        raw: Dict[str, np.ndarray] = {}
        (n_arrays,) = struct.unpack("<I", stream.read(4))
        for _ in range(n_arrays):
            name = _read_name(stream)
            (ndim,) = struct.unpack("<B", stream.read(1))
            shape = struct.unpack(f"<{ndim}Q", stream.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(stream.read(8 * count), dtype="<f8").astype(np.float64)
            raw[name] = data.reshape(shape)

    grouped: Dict[str, Dict[str, Dict[str, np.ndarray]]] = {}
    for key, value in raw.items():
        prefix, name = key.split("/", 1)
        slot = "arrays"
        if name.endswith(_FIRST_MOMENT_SUFFIX):
            slot, name = "first_moment", name[: -len(_FIRST_MOMENT_SUFFIX)]
        elif name.endswith(_SECOND_MOMENT_SUFFIX):
            slot, name = "second_moment", name[: -len(_SECOND_MOMENT_SUFFIX)]
        grouped.setdefault(prefix, {}).setdefault(slot, {})[name] = value

    parameter_sets = {
        prefix: ParameterSet(
            arrays=slots["arrays"],
            first_moment=slots.get("first_moment", {}),
            second_moment=slots.get("second_moment", {}),
            step=counters.pop(f"{prefix}{_STEP_SUFFIX}", 0),
        )
        for prefix, slots in grouped.items()
    }
    return parameter_sets, counters
