"""Versioned JSON checkpoints for trained classifiers and the toy VAE.

Arrays are stored as base64 little-endian float64 bytes so a save/load round
trip is bit exact on any host. The file layout is versioned; loaders refuse
anything they were not written for rather than guessing.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .engine import MlpModel
from .errors import DataError, StateError
from .head import ClassPrototypes, HeadConfig, QualityCalibration
from .steer import ToyVae
from .trainer import CSV_FIELDS, EpochRecord, TrainedArtifacts, TrainLog

FORMAT = "gacl-checkpoint"
VERSION = 1


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _dec(obj: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"], validate=True)
        a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return a.reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed array block in checkpoint: {e}") from None


def _enc_model(m: MlpModel) -> dict:
    return {"layer_dims": list(m.layer_dims),
            "activation": m.activation,
            "weights": [_enc(w) for w in m.weights],
            "biases": [_enc(b) for b in m.biases]}


def _dec_model(obj: dict) -> MlpModel:
    return MlpModel(layer_dims=list(obj["layer_dims"]),
                    weights=[_dec(w) for w in obj["weights"]],
                    biases=[_dec(b) for b in obj["biases"]],
                    activation=obj["activation"])


def _write(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def _read(path, kind: str) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint is not valid JSON: {e}") from None
    if payload.get("format") != FORMAT:
        raise StateError(f"not a {FORMAT} file: {path}")
    if payload.get("version") != VERSION:
        raise StateError(f"unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise StateError(f"expected a {kind} checkpoint, got {payload.get('kind')}")
    return payload


def save_classifier(art: TrainedArtifacts, path) -> None:
    head = art.head
    payload = {
        "format": FORMAT, "version": VERSION, "kind": "classifier",
        "model": _enc_model(art.model),
        "prototypes": _enc(art.prototypes.w),
        "calib": {"mu0": art.calib.mu0, "sigma0": art.calib.sigma0,
                  "l_q": art.calib.l_q, "u_q": art.calib.u_q},
        "head": {"instantiation": head.instantiation, "l_q": head.l_q,
                 "u_q": head.u_q, "s": head.s, "class_count": head.class_count,
                 "feature_dim": head.feature_dim, "lambda_g": head.lambda_g},
        "log": [{f: getattr(r, f) for f in CSV_FIELDS} for r in art.log.records],
    }
    if art.pseudo_labels is not None:
        payload["pseudo_labels"] = [int(v) for v in art.pseudo_labels]
    if art.pseudo_centres is not None:
        payload["pseudo_centres"] = _enc(art.pseudo_centres)
    _write(path, payload)


def load_classifier(path) -> TrainedArtifacts:
    p = _read(path, "classifier")
    try:
        head = HeadConfig(**p["head"])
        calib = QualityCalibration(**p["calib"])
        log = TrainLog(records=[EpochRecord(**r) for r in p["log"]])
        art = TrainedArtifacts(
            model=_dec_model(p["model"]),
            prototypes=ClassPrototypes(_dec(p["prototypes"])),
            calib=calib, head=head, log=log,
            pseudo_labels=(np.asarray(p["pseudo_labels"], dtype=np.int64)
                           if "pseudo_labels" in p else None),
            pseudo_centres=(_dec(p["pseudo_centres"])
                            if "pseudo_centres" in p else None),
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"classifier checkpoint missing fields: {e}") from None
    return art


def save_vae(vae: ToyVae, path) -> None:
    _write(path, {
        "format": FORMAT, "version": VERSION, "kind": "vae",
        "encoder": _enc_model(vae.encoder),
        "decoder": _enc_model(vae.decoder),
        "z_dim": vae.z_dim, "steps": vae.steps, "mixtures": vae.mixtures,
    })


def load_vae(path) -> ToyVae:
    p = _read(path, "vae")
    try:
        return ToyVae(encoder=_dec_model(p["encoder"]),
                      decoder=_dec_model(p["decoder"]),
                      z_dim=int(p["z_dim"]), steps=int(p["steps"]),
                      mixtures=int(p["mixtures"]))
    except (KeyError, TypeError) as e:
        raise DataError(f"vae checkpoint missing fields: {e}") from None
