"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Binary containers for checkpoints, corpora and prediction outputs.

Every file starts with an 8-byte magic and a little-endian u32 format version,
followed by a u32-length-prefixed JSON block (sorted keys, no timestamps) and
sections of named arrays. A named array is

    u16 name length, name (utf-8), u8 dtype tag length, dtype tag (numpy, e.g. "<f8"),
    u8 ndim, ndim x u64 shape, u64 payload length, little-endian payload.
"""

import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional

import numpy as np

from .adapter import FeatureMoments, GoldenRPGModel
from .config import CorpusConfig, DimsConfig, RunConfig, config_hash, portable_config
from .errors import CheckpointError, CorpusError
from .geometry import RegionLayout
from .synthetic import Corpus, CorpusStats, PromptRecord, TrainingRecord, compute_stats

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GRPGCKPT"
CORPUS_MAGIC = b"GRPGCORP"
ARRAYS_MAGIC = b"GRPGARRS"
FORMAT_VERSION = 1

Arrays = Dict[str, np.ndarray]


class _Reader:
    """Bounds-checked reads; every failure names what was being read."""

    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise CheckpointError(f"{self.source}: truncated while reading {what}, needed {size} bytes at offset "
                                  f"{self.offset}, {len(self.data) - self.offset} left.")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def finished(self) -> bool:
        return self.offset == len(self.data)


def _writeHeader(stream: BinaryIO, magic: bytes, metadata: dict):
    stream.write(magic)
    stream.write(struct.pack("<I", FORMAT_VERSION))
    payload = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    stream.write(struct.pack("<I", len(payload)))
    stream.write(payload)


def _readHeader(reader: _Reader, magic: bytes) -> dict:
    found = reader.take(len(magic), "magic")
    if found != magic:
        raise CheckpointError(f"{reader.source}: bad magic {found!r}, expected {magic!r}.")
    (version,) = reader.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{reader.source}: unsupported format version {version}, expected {FORMAT_VERSION}.")
    (length,) = reader.unpack("<I", "metadata length")
    try:
        return json.loads(reader.take(length, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"{reader.source}: unreadable metadata block: {error}.") from error


def write_array(stream: BinaryIO, name: str, array: np.ndarray):
    array = np.asarray(array)
    little = array.astype(array.dtype.newbyteorder("<"), copy=False)
    encoded = name.encode("utf-8")
    tag = little.dtype.str.encode("ascii")
    stream.write(struct.pack("<H", len(encoded)) + encoded)
    stream.write(struct.pack("<B", len(tag)) + tag)
    stream.write(struct.pack("<B", little.ndim))
    stream.write(struct.pack(f"<{little.ndim}Q", *little.shape))
    payload = np.ascontiguousarray(little).tobytes()
    stream.write(struct.pack("<Q", len(payload)))
    stream.write(payload)


def read_array(reader: _Reader) -> tuple:
    (name_length,) = reader.unpack("<H", "array name length")
    name = reader.take(name_length, "array name").decode("utf-8")
    (tag_length,) = reader.unpack("<B", f"dtype of {name}")
    tag = reader.take(tag_length, f"dtype of {name}").decode("ascii")
    try:
        dtype = np.dtype(tag)
    except TypeError as error:
        raise CheckpointError(f"{reader.source}: array {name} has unknown dtype tag {tag!r}.") from error
    (ndim,) = reader.unpack("<B", f"rank of {name}")
    shape = reader.unpack(f"<{ndim}Q", f"shape of {name}")
    (length,) = reader.unpack("<Q", f"payload length of {name}")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if length != expected:
        raise CheckpointError(f"{reader.source}: array {name} declares {length} payload bytes, shape {shape} of "
                              f"{tag} needs {expected}.")
    if reader.offset + length > len(reader.data):
        raise CheckpointError(f"{reader.source}: array {name} is truncated, {length} bytes declared, "
                              f"{len(reader.data) - reader.offset} left.")
    payload = reader.take(length, f"payload of {name}")
    return name, np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_section(stream: BinaryIO, arrays: Arrays):
    stream.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        write_array(stream, name, arrays[name])


def read_section(reader: _Reader, what: str) -> Arrays:
    (count,) = reader.unpack("<I", f"{what} section size")
    arrays = {}
    for _ in range(count):
        name, array = read_array(reader)
        arrays[name] = array
    return arrays


def _readFile(path: str) -> bytes:
    try:
        with open(path, "rb") as file:
            return file.read()
    except OSError as error:
        raise CheckpointError(f"Cannot read {path}: {error.strerror}.") from error


def _writeFile(path: str, payload: bytes):
    with open(path, "wb") as file:
        file.write(payload)


@dataclass(frozen=True)
class Checkpoint:
    variant: str
    epoch: int
    config_hash: str
    corpus_stats: dict
    moments: FeatureMoments
    frozen: Arrays
    trainable: Arrays
    config: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {"variant": self.variant, "epoch": self.epoch, "config_hash": self.config_hash,
                "corpus_stats": self.corpus_stats, "config": self.config,
                "feature_moments": {"mean": self.moments.mean.tolist(), "std": self.moments.std.tolist()}}


def save_checkpoint(checkpoint: Checkpoint, path: str):
    stream = io.BytesIO()
    _writeHeader(stream, CHECKPOINT_MAGIC, checkpoint.metadata())
    write_section(stream, checkpoint.frozen)
    write_section(stream, checkpoint.trainable)
    _writeFile(path, stream.getvalue())
    logger.debug("Saved %s checkpoint at epoch %d to %s", checkpoint.variant, checkpoint.epoch, path)


def load_checkpoint(path: str) -> Checkpoint:
    reader = _Reader(_readFile(path), path)
    metadata = _readHeader(reader, CHECKPOINT_MAGIC)
    frozen = read_section(reader, "frozen")
    trainable = read_section(reader, "trainable")
    if not reader.finished():
        raise CheckpointError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after the trainable section.")
    try:
        moments = metadata["feature_moments"]
        return Checkpoint(metadata["variant"], int(metadata["epoch"]), metadata["config_hash"],
                          metadata["corpus_stats"], FeatureMoments(np.asarray(moments["mean"], dtype=np.float64),
                                                                   np.asarray(moments["std"], dtype=np.float64)),
                          frozen, trainable, metadata.get("config", {}))
    except KeyError as error:
        raise CheckpointError(f"{path}: metadata is missing {error}.") from error


def checkpoint_from_model(model: GoldenRPGModel, config: RunConfig, epoch: int, stats: CorpusStats) -> Checkpoint:
    """Frozen surrogate arrays plus the arrays of the blocks the model's variant trains."""
    trainable = {name: tensor.numpy() for name, tensor in model.trainable_parameters().items()}
    return Checkpoint(model.variant, int(epoch), config_hash(config), stats.to_dict(), model.moments,
                      model.frozen_state(), trainable, portable_config(config))


def _blockState(trainable: Arrays, block: str) -> Arrays:
    prefix = block + "."
    return {name[len(prefix):]: array for name, array in trainable.items() if name.startswith(prefix)}


def model_from_checkpoint(checkpoint: Checkpoint, config: RunConfig, force: bool = False) -> GoldenRPGModel:
    """
    Rebuilds the model a checkpoint was saved from. A checkpoint written under a
    different configuration is still loaded, with a warning unless forced.
    """
    expected = config_hash(config)
    if checkpoint.config_hash != expected and not force:
        logger.warning("Checkpoint config hash %s differs from the current configuration %s; use --force to "
                       "silence this.", checkpoint.config_hash, expected)
    model = GoldenRPGModel(config.adapter, config.surrogate, config.dims, checkpoint.variant, checkpoint.moments)
    model.surrogate.load_state_dict(checkpoint.frozen)
    model.surrogate.set_requires_grad(False)
    for block in model.blocks:
        state = _blockState(checkpoint.trainable, block)
        if not state:
            raise CheckpointError(f"Checkpoint of variant {checkpoint.variant} has no trainable {block} section.")
        getattr(model, block).load_state_dict(state)
    return model


def warm_start(model: GoldenRPGModel, checkpoint: Checkpoint) -> List[str]:
    """
    Copies every block the checkpoint carries and the model trains, except the
    Confidence Head which always starts fresh. Returns the copied block names.
    """
    copied = []
    for block in model.blocks:
        state = _blockState(checkpoint.trainable, block)
        if block == "confidence" or not state:
            continue
        getattr(model, block).load_state_dict(state)
        copied.append(block)
    if not copied:
        raise CheckpointError(f"Checkpoint of variant {checkpoint.variant} has nothing to warm-start "
                              f"a {model.variant} model from.")
    logger.info("Warm-started %s from a %s checkpoint (epoch %d)", ", ".join(copied), checkpoint.variant,
                checkpoint.epoch)
    return copied


def _recordMetadata(record: TrainingRecord) -> dict:
    prompt = record.prompt
    return {"prompt_id": prompt.prompt_id, "category": prompt.category,
            "regions": [[concept, attribute] for concept, attribute in prompt.regions],
            "ratios": list(prompt.layout.ratios), "axis": prompt.layout.axis, "seed": prompt.seed,
            "regional": prompt.regional, "delta": record.delta}


def _recordArrays(record: TrainingRecord) -> Arrays:
    arrays = {"global_tokens": record.prompt.global_tokens, "region_tokens": record.prompt.region_tokens,
              "z_t": record.z_t, "z_pos": record.z_pos, "z_neg": record.z_neg, "scores": record.scores}
    if record.candidates is not None:
        arrays["candidates"] = record.candidates
    return arrays


def save_corpus(corpus: Corpus, path: str):
    header = {"settings": dataclasses.asdict(corpus.settings), "dims": dataclasses.asdict(corpus.dims),
              "stats": corpus.stats.to_dict(), "count": len(corpus.records)}
    stream = io.BytesIO()
    _writeHeader(stream, CORPUS_MAGIC, header)
    for record in corpus.records:
        payload = json.dumps(_recordMetadata(record), sort_keys=True, separators=(",", ":")).encode("utf-8")
        stream.write(struct.pack("<I", len(payload)))
        stream.write(payload)
        write_section(stream, _recordArrays(record))
    _writeFile(path, stream.getvalue())
    logger.info("Wrote %d records to %s", len(corpus.records), path)


def load_corpus(path: str) -> Corpus:
    reader = _Reader(_readFile(path), path)
    header = _readHeader(reader, CORPUS_MAGIC)
    dims = DimsConfig(**header["dims"])
    settings = CorpusConfig(**header["settings"])
    records = []
    for index in range(int(header["count"])):
        (length,) = reader.unpack("<I", f"record {index} metadata length")
        meta = json.loads(reader.take(length, f"record {index} metadata").decode("utf-8"))
        arrays = read_section(reader, f"record {index}")
        regions = tuple((concept, attribute) for concept, attribute in meta["regions"])
        layout = RegionLayout(tuple(meta["ratios"]), dims.latent, dims.latent, meta["axis"])
        prompt = PromptRecord(meta["prompt_id"], meta["category"], regions, layout, arrays["global_tokens"],
                              arrays["region_tokens"], int(meta["seed"]), bool(meta["regional"]))
        records.append(TrainingRecord(prompt, arrays["z_t"], arrays["z_pos"], arrays["z_neg"], float(meta["delta"]),
                                      arrays["scores"], arrays.get("candidates")))
    if not reader.finished():
        raise CorpusError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after "
                          f"{header['count']} records.")
    stats = compute_stats(records)
    recorded = CorpusStats.from_dict(header["stats"])
    if stats.count != recorded.count or abs(stats.delta_mean - recorded.delta_mean) > 1e-12:
        raise CorpusError(f"{path}: header says {recorded.count} records with mean gap {recorded.delta_mean}, "
                          f"records give {stats.count} and {stats.delta_mean}.")
    return Corpus(records, recorded, settings, dims)


def save_arrays(arrays: Arrays, path: str, metadata: Optional[dict] = None):
    """Generic named-array file, used for predictions and rendered scenes."""
    stream = io.BytesIO()
    _writeHeader(stream, ARRAYS_MAGIC, metadata or {})
    write_section(stream, arrays)
    _writeFile(path, stream.getvalue())


def load_arrays(path: str) -> tuple:
    reader = _Reader(_readFile(path), path)
    metadata = _readHeader(reader, ARRAYS_MAGIC)
    return metadata, read_section(reader, "arrays")
