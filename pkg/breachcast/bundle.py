"""Single-file persistence of every learned artifact.

Layout: magic ``PMBD``, u16 version, u32 header length (little-endian), a UTF-8 JSON header
(config, provenance, array manifest, payload checksum), then the arrays back to back as
little-endian f32 (weights, centroids) or i64 (counts).
"""

import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from breachcast.config import PipelineConfig
from breachcast.detector import Thresholds
from breachcast.errors import (
    ChecksumMismatchError,
    InconsistentDimensionsError,
    ModelError,
    VersionUnsupportedError,
)
from breachcast.markov import TransitionModel
from breachcast.neural import Dense, DenseNet, LayerNorm
from breachcast.quantizer import Codebook

logger = logging.getLogger(__name__)

MAGIC = b"PMBD"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sHI")


@dataclass
class ModelBundle:
    config: PipelineConfig
    codebook: Codebook
    transitions: TransitionModel
    head: DenseNet
    thresholds: Thresholds
    projection: Optional[DenseNet] = None
    score_net: Optional[DenseNet] = None
    binary_head: Optional[DenseNet] = None
    provider: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return self.codebook.n_clusters

    @property
    def state_dim(self) -> int:
        return self.head.input_dim

    def check_consistency(self) -> "ModelBundle":
        problems = []
        k = self.codebook.n_clusters
        if self.transitions.n_clusters != k:
            problems.append("transition model over {} clusters, codebook has {}".format(self.transitions.n_clusters, k))
        if self.head.output_dim != k:
            problems.append("proactive head predicts {} clusters, codebook has {}".format(self.head.output_dim, k))
        space_dim = self.projection.output_dim if self.projection is not None else self.state_dim
        if self.codebook.dim != space_dim:
            problems.append("centroids of dim {} for a causal space of dim {}".format(self.codebook.dim, space_dim))
        if self.projection is not None and self.projection.input_dim != self.state_dim:
            problems.append("projection reads {} features, states have {}".format(
                self.projection.input_dim, self.state_dim))
        if self.score_net is not None and (self.score_net.input_dim != self.state_dim or self.score_net.output_dim != 1):
            problems.append("score net maps {}->{}, expected {}->1".format(
                self.score_net.input_dim, self.score_net.output_dim, self.state_dim))
        if self.binary_head is not None and (self.binary_head.output_dim != 2
                                             or self.binary_head.input_dim != self.state_dim):
            problems.append("binary head maps {}->{}".format(self.binary_head.input_dim, self.binary_head.output_dim))
        if problems:
            raise InconsistentDimensionsError("; ".join(problems))
        return self


def creation_time() -> str:
    """UTC timestamp, taken from ``SOURCE_DATE_EPOCH`` when set."""
    epoch = os.getenv("SOURCE_DATE_EPOCH")
    seconds = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(seconds))


# ==============================================================================================================
# encoding

class _Writer(object):
    def __init__(self):
        self.manifest: List[Dict[str, Any]] = []
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, name: str, array: np.ndarray, dtype: str):
        data = np.ascontiguousarray(array, dtype="<" + dtype).tobytes()
        self.manifest.append({"name": name, "dtype": dtype, "shape": list(np.shape(array)),
                              "offset": self.offset, "nbytes": len(data)})
        self.chunks.append(data)
        self.offset += len(data)

    def add_net(self, prefix: str, net: Optional[DenseNet]) -> Optional[Dict[str, Any]]:
        if net is None:
            return None
        if net.norm is not None:
            self.add(prefix + "/norm.gain", net.norm.gain, "f4")
            self.add(prefix + "/norm.offset", net.norm.offset, "f4")
        for i, layer in enumerate(net.layers):
            self.add("{}/layers.{}.weights".format(prefix, i), layer.weights, "f4")
            self.add("{}/layers.{}.bias".format(prefix, i), layer.bias, "f4")
        return {"activations": [layer.activation for layer in net.layers],
                "layer_norm": net.norm is not None,
                "norm_eps": net.norm.eps if net.norm is not None else None}


def encode_bundle(bundle: ModelBundle) -> bytes:
    bundle.check_consistency()
    writer = _Writer()
    nets = {name: writer.add_net(name, getattr(bundle, name))
            for name in ("score_net", "projection", "head", "binary_head")}
    writer.add("codebook/centroids", bundle.codebook.centroids, "f4")
    tm = bundle.transitions
    writer.add("transitions/fail_counts", tm.fail_counts, "i8")
    writer.add("transitions/succ_counts", tm.succ_counts, "i8")
    writer.add("transitions/fail_start", tm.fail_start, "i8")
    writer.add("transitions/succ_start", tm.succ_start, "i8")
    payload = b"".join(writer.chunks)

    header = {
        "format_version": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "thresholds": asdict(bundle.thresholds),
        "transitions": {"epsilon": tm.epsilon, "beta": tm.beta, "scope": tm.scope},
        "inertia_history": [float(v) for v in bundle.codebook.inertia_history],
        "nets": nets,
        "provider": bundle.provider,
        "provenance": bundle.provenance,
        "manifest": writer.manifest,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + payload


def save(bundle: ModelBundle, path: Union[str, Path]) -> None:
    data = encode_bundle(bundle)
    Path(path).write_bytes(data)
    logger.info("Saved bundle (%d bytes, K=%d) to %s", len(data), bundle.n_clusters, path)


# ==============================================================================================================
# decoding

def _read_header(data: bytes) -> Tuple[Dict[str, Any], bytes]:
    if len(data) < PREAMBLE.size:
        raise ModelError("file too short for a bundle")
    magic, version, header_length = PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ModelError("not a bundle: magic {!r}".format(magic))
    if version != FORMAT_VERSION:
        raise VersionUnsupportedError("bundle format version {} (supported: {})".format(version, FORMAT_VERSION))
    end = PREAMBLE.size + header_length
    try:
        header = json.loads(data[PREAMBLE.size:end].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ChecksumMismatchError("bundle header is corrupt") from exc
    return header, data[end:]


def _net_from(prefix: str, layout: Optional[Dict[str, Any]], arrays: Dict[str, np.ndarray]) -> Optional[DenseNet]:
    if layout is None:
        return None
    norm = None
    if layout["layer_norm"]:
        norm = LayerNorm(gain=arrays[prefix + "/norm.gain"], offset=arrays[prefix + "/norm.offset"],
                         eps=layout["norm_eps"])
    layers = [Dense(weights=arrays["{}/layers.{}.weights".format(prefix, i)],
                    bias=arrays["{}/layers.{}.bias".format(prefix, i)],
                    activation=activation)
              for i, activation in enumerate(layout["activations"])]
    try:
        return DenseNet(layers, norm)
    except ValueError as exc:
        raise InconsistentDimensionsError("{}: {}".format(prefix, exc)) from exc


def decode_bundle(data: bytes) -> ModelBundle:
    header, payload = _read_header(data)
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ChecksumMismatchError("bundle payload does not match its checksum")

    arrays = {}
    for entry in header["manifest"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype="<" + entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = array.astype(np.float64 if entry["dtype"] == "f4" else np.int64)

    nets = {name: _net_from(name, header["nets"].get(name), arrays)
            for name in ("score_net", "projection", "head", "binary_head")}
    tm = header["transitions"]
    bundle = ModelBundle(
        config=PipelineConfig.from_mapping(header["config"]),
        codebook=Codebook(centroids=arrays["codebook/centroids"], inertia_history=list(header["inertia_history"])),
        transitions=TransitionModel(fail_counts=arrays["transitions/fail_counts"],
                                    succ_counts=arrays["transitions/succ_counts"],
                                    fail_start=arrays["transitions/fail_start"],
                                    succ_start=arrays["transitions/succ_start"],
                                    epsilon=tm["epsilon"], beta=tm["beta"], scope=tm["scope"]),
        head=nets["head"],
        thresholds=Thresholds(**header["thresholds"]),
        projection=nets["projection"],
        score_net=nets["score_net"],
        binary_head=nets["binary_head"],
        provider=header["provider"],
        provenance=header["provenance"],
    )
    return bundle.check_consistency()


def load(path: Union[str, Path]) -> ModelBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ModelError("cannot read bundle {}: {}".format(path, exc)) from exc
    bundle = decode_bundle(data)
    logger.debug("Loaded bundle %s (K=%d, d=%d)", path, bundle.n_clusters, bundle.state_dim)
    return bundle
