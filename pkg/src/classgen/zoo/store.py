"""Versioned on-disk container for zoo artifacts.

A container is a single torch-serialized dict carrying the format tag,
version, kind, architecture metadata, training config hash, state dicts,
and the training report.  Loading a container rebuilds the architecture
from metadata and restores weights bit-exactly.
"""

from __future__ import annotations

import hashlib
import json

import torch

from ..errors import ModelStoreError
from ..models import GeneralizedClassifier
from .nets import build_classifier, build_dual_encoder, build_reconstruction

FORMAT = "classgen-model"
VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _container(kind: str, meta: dict, states: dict, report: dict) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta,
        "states": states,
        "report": report,
        "config_hash": config_hash(report.get("config", {})),
    }


def save_classifier(model: GeneralizedClassifier, path: str, preset: str, report: dict) -> None:
    meta = {
        "preset": preset,
        "num_classes": model.num_classes,
        "feature_dim": model.feature_dim,
        "in_channels": model.in_channels,
        "resolution": model.expected_input_resolution,
    }
    torch.save(_container("classifier", meta, {"model": model.state_dict()}, report), path)


def save_reconstruction(module, path: str, report: dict) -> None:
    meta = {
        "in_channels": module.in_channels,
        "patch_size": module.patch_size,
        "width": module.net[0].out_channels,
        "fill_value": module.fill_value,
    }
    torch.save(_container("reconstruction", meta, {"model": module.state_dict()}, report), path)


def save_dual_encoder(image_encoder, text_encoder, path: str, report: dict,
                      class_names=None) -> None:
    meta = {
        "in_channels": image_encoder.in_channels,
        "resolution": image_encoder.expected_input_resolution,
        "embed_dim": image_encoder.embed_dim,
        "vocab": text_encoder.vocab,
        "class_names": list(class_names) if class_names else sorted(text_encoder.vocab),
    }
    states = {"image_encoder": image_encoder.state_dict(),
              "text_encoder": text_encoder.state_dict()}
    torch.save(_container("dual_encoder", meta, states, report), path)


def _read_container(path: str) -> dict:
    try:
        data = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ModelStoreError(f"{path}: unreadable or corrupted container ({exc})") from exc
    if not isinstance(data, dict) or data.get("format") != FORMAT:
        raise ModelStoreError(f"{path}: not a {FORMAT} container")
    if data.get("version") != VERSION:
        raise ModelStoreError(
            f"{path}: container version {data.get('version')} unsupported (expected {VERSION})"
        )
    return data


def load_model(path: str):
    """Rebuild the stored artifact; returns (model, container).

    ``model`` is a GeneralizedClassifier, a reconstruction module, or an
    (image_encoder, text_encoder) pair depending on the stored kind.
    """
    data = _read_container(path)
    kind, meta = data["kind"], data["meta"]
    if kind == "classifier":
        model = build_classifier(meta["preset"], meta["num_classes"],
                                 meta["in_channels"], meta["resolution"],
                                 meta["feature_dim"])
        model.load_state_dict(data["states"]["model"])
        model = model.double().eval()
    elif kind == "reconstruction":
        model = build_reconstruction(meta["in_channels"], meta["patch_size"],
                                     meta["width"], meta["fill_value"])
        model.load_state_dict(data["states"]["model"])
        model = model.double().eval()
    elif kind == "dual_encoder":
        image_encoder, text_encoder = build_dual_encoder(
            meta["class_names"], meta["in_channels"], meta["resolution"],
            meta["embed_dim"])
        if text_encoder.vocab != meta["vocab"]:
            text_encoder.vocab = dict(meta["vocab"])
        image_encoder.load_state_dict(data["states"]["image_encoder"])
        text_encoder.load_state_dict(data["states"]["text_encoder"])
        model = (image_encoder.double().eval(), text_encoder.double().eval())
    else:
        raise ModelStoreError(f"{path}: unknown artifact kind {kind!r}")
    return model, data


def load_classifier(path: str) -> GeneralizedClassifier:
    model, data = load_model(path)
    if data["kind"] != "classifier":
        raise ModelStoreError(f"{path}: expected a classifier, found {data['kind']}")
    return model


def load_reconstruction(path: str):
    model, data = load_model(path)
    if data["kind"] != "reconstruction":
        raise ModelStoreError(f"{path}: expected a reconstruction module, found {data['kind']}")
    return model


def load_dual_encoder(path: str):
    model, data = load_model(path)
    if data["kind"] != "dual_encoder":
        raise ModelStoreError(f"{path}: expected a dual encoder, found {data['kind']}")
    return model
