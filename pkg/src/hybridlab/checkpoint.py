"""Flat binary checkpoint container.

Layout: 8-byte magic, uint32 version, 8-byte section tag, a dimension
table describing every affine layer, then all parameters as row-major
little-endian float64. Round-trips are bit-exact.
"""

import struct

import numpy as np

from . import nn
from .model import HybridModel

MAGIC = b"HYBLAB\x00\x01"
VERSION = 1
TAG_MODEL = b"MODEL\x00\x00\x00"
TAG_FLOW = b"FLOW\x00\x00\x00\x00"

_ACT_CODE = {"identity": 0, "relu": 1, "sigmoid": 2}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def _write_mlp_table(fh, net):
    fh.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        fh.write(struct.pack("<IIB", layer.weight.shape[0],
                             layer.weight.shape[1],
                             _ACT_CODE[layer.activation]))


def _read_mlp_table(fh):
    (n_layers,) = struct.unpack("<I", fh.read(4))
    table = []
    for _ in range(n_layers):
        d_in, d_out, act = struct.unpack("<IIB", fh.read(9))
        table.append((d_in, d_out, _CODE_ACT[act]))
    return table


def _write_mlp_params(fh, net):
    for layer in net.layers:
        fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def _read_mlp_params(fh, table):
    layers = []
    for d_in, d_out, act in table:
        w = np.frombuffer(fh.read(8 * d_in * d_out), dtype="<f8")
        b = np.frombuffer(fh.read(8 * d_out), dtype="<f8")
        layers.append(nn.AffineLayer(w.reshape(d_in, d_out).astype(np.float64),
                                     b.astype(np.float64), act))
    return nn.MlpNetwork(layers)


def _check_header(fh, expected_tag):
    if fh.read(8) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tag = fh.read(8)
    if tag != expected_tag:
        raise ValueError(f"unexpected section tag {tag!r}")


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(TAG_MODEL)
        fh.write(struct.pack("<I", model.n_classes))
        for net in (model.extractor, model.classifier, model.posterior):
            _write_mlp_table(fh, net)
        for net in (model.extractor, model.classifier, model.posterior):
            _write_mlp_params(fh, net)


def load_model(path):
    with open(path, "rb") as fh:
        _check_header(fh, TAG_MODEL)
        (n_classes,) = struct.unpack("<I", fh.read(4))
        tables = [_read_mlp_table(fh) for _ in range(3)]
        nets = [_read_mlp_params(fh, t) for t in tables]
    return HybridModel(*nets, n_classes=n_classes)


def save_flow(flow, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(TAG_FLOW)
        fh.write(struct.pack("<Id", flow.dim, flow.max_log_scale))
        fh.write(struct.pack("<I", len(flow.layers)))
        for layer in flow.layers:
            fh.write(struct.pack("<B", layer.parity))
            _write_mlp_table(fh, layer.net)
        for layer in flow.layers:
            _write_mlp_params(fh, layer.net)


def load_flow(path):
    from .flow import CouplingFlow, CouplingLayer
    with open(path, "rb") as fh:
        _check_header(fh, TAG_FLOW)
        dim, max_log_scale = struct.unpack("<Id", fh.read(12))
        (n_layers,) = struct.unpack("<I", fh.read(4))
        parities, tables = [], []
        for _ in range(n_layers):
            (parity,) = struct.unpack("<B", fh.read(1))
            parities.append(parity)
            tables.append(_read_mlp_table(fh))
        layers = [CouplingLayer(parity=p, net=_read_mlp_params(fh, t), dim=dim)
                  for p, t in zip(parities, tables)]
    return CouplingFlow(layers=layers, dim=dim, max_log_scale=max_log_scale)
