"""Regression trees stored as flat node arrays, and the forest that averages them."""

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from numcore.errors import PdsmError
from numcore.storage import read_json, write_json

LEAF = -1
NO_CHILD = 0xFFFFFFFF
TREE_MAGIC = b'TRE1'

# Header as in TNS1: magic, u32 rank (always 1), u32 node count.
# Records: u32 feature | f32 threshold | u32 left | u32 right | f32 leaf_mean | u32 count, little-endian, packed
HEADER = struct.Struct('<4sII')
NODE_RECORD = np.dtype([
    ('feature', '<u4'), ('threshold', '<f4'), ('left', '<u4'),
    ('right', '<u4'), ('leaf_mean', '<f4'), ('count', '<u4'),
])


@dataclass(frozen=True)
class ForestHyper:
    """0 means "auto" (ceil(p/3)) for max_features and "unlimited" for max_depth."""

    n_trees: int = 200
    max_features: int = 0
    min_samples_leaf: int = 2
    max_depth: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise PdsmError('n_trees must be >= 1')
        if self.min_samples_leaf < 1:
            raise PdsmError('min_samples_leaf must be >= 1')
        if self.max_features < 0 or self.max_depth < 0:
            raise PdsmError('max_features and max_depth must be >= 0')

    def features_for(self, p):
        if self.max_features == 0:
            return max(1, math.ceil(p / 3))
        return min(self.max_features, p)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """
    Nodes in parallel arrays; node 0 is the root. Leaves have feature == LEAF
    and children == -1. `value` holds the mean target of every node.
    Thresholds and values are float32-representable so encoding is lossless.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        internal = self.feature != LEAF
        if np.any((self.left[internal] < 0) | (self.right[internal] < 0)):
            raise PdsmError('internal node without two children')
        if not (np.all(np.isfinite(self.threshold)) and np.all(np.isfinite(self.value))):
            raise PdsmError('tree holds non-finite thresholds or leaf means')
        for name in ('threshold', 'value'):
            array = getattr(self, name)
            if np.any(array.astype(np.float32).astype(np.float64) != array):
                raise PdsmError(f'tree {name} is not float32-representable')
        for array in (self.feature, self.threshold, self.left, self.right, self.value, self.count):
            array.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def n_leaves(self):
        return int(np.sum(self.feature == LEAF))

    def leaf_index(self, rows):
        """Index of the leaf each row of an (n, p) array falls into (x <= threshold goes left)."""
        nodes = np.zeros(len(rows), dtype=np.int64)
        active = self.feature[nodes] != LEAF
        while np.any(active):
            current = nodes[active]
            go_left = rows[active, self.feature[current]] <= self.threshold[current]
            nodes[active] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[nodes] != LEAF
        return nodes

    def predict_many(self, rows):
        return self.value[self.leaf_index(rows)]

    def encode(self):
        records = np.zeros(self.n_nodes, dtype=NODE_RECORD)
        leaf = self.feature == LEAF
        records['feature'] = np.where(leaf, NO_CHILD, self.feature)
        records['threshold'] = self.threshold
        records['left'] = np.where(leaf, NO_CHILD, self.left)
        records['right'] = np.where(leaf, NO_CHILD, self.right)
        records['leaf_mean'] = self.value
        records['count'] = self.count
        return HEADER.pack(TREE_MAGIC, 1, self.n_nodes) + records.tobytes()

    @classmethod
    def decode(cls, data, source='<bytes>'):
        if len(data) < HEADER.size:
            raise PdsmError(f'{source}: truncated tree header')
        magic, rank, n_nodes = HEADER.unpack_from(data)
        if magic != TREE_MAGIC:
            raise PdsmError(f'{source}: missing tree magic')
        if rank != 1:
            raise PdsmError(f'{source}: node array must have rank 1, got {rank}')
        if len(data) - HEADER.size != n_nodes * NODE_RECORD.itemsize:
            raise PdsmError(f'{source}: expected {n_nodes} node records')
        records = np.frombuffer(data, dtype=NODE_RECORD, offset=HEADER.size)
        leaf = records['feature'] == NO_CHILD

        def signed(column):
            return np.where(leaf, LEAF, records[column].astype(np.int64))

        return cls(
            feature=signed('feature'),
            threshold=records['threshold'].astype(np.float64),
            left=signed('left'),
            right=signed('right'),
            value=records['leaf_mean'].astype(np.float64),
            count=records['count'].astype(np.int64),
        )


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    hyper: ForestHyper
    seed: int
    input_dimension: int

    def __post_init__(self):
        object.__setattr__(self, 'trees', tuple(self.trees))
        if len(self.trees) != self.hyper.n_trees:
            raise PdsmError(f'expected {self.hyper.n_trees} trees, got {len(self.trees)}')
        for tree in self.trees:
            internal = tree.feature[tree.feature != LEAF]
            if internal.size and internal.max() >= self.input_dimension:
                raise PdsmError('tree splits on a feature beyond the input dimension')


def save_forest(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for index, tree in enumerate(model.trees):
        name = f'tree_{index:04d}.bin'
        (directory / name).write_bytes(tree.encode())
        names.append(name)
    write_json(directory / 'forest.json', {
        'hyper': model.hyper.to_dict(),
        'seed': model.seed,
        'input_dimension': model.input_dimension,
        'trees': names,
    })


def load_forest(directory):
    directory = Path(directory)
    meta = read_json(directory / 'forest.json')
    trees = [RegressionTree.decode((directory / name).read_bytes(), source=name) for name in meta['trees']]
    return ForestModel(
        trees=trees,
        hyper=ForestHyper(**meta['hyper']),
        seed=int(meta['seed']),
        input_dimension=int(meta['input_dimension']),
    )
