"""Versioned checkpoint bundles.

A bundle is a directory holding ``state.pt`` (a ``torch.save`` payload) and
``manifest.json`` with the format version, step, phase, config hash and the
SHA-256 of the payload. Bundles are written to a temporary sibling directory
and renamed into place, so a reader never sees a partial bundle.
"""

import hashlib
import io
import json
import os
from pathlib import Path
import shutil
import tempfile

import torch

from .errors import CheckpointIntegrityError

FORMAT_NAME = "ctfgan-checkpoint"
FORMAT_VERSION = 1
STATE_FILE = "state.pt"
MANIFEST_FILE = "manifest.json"


def save_bundle(directory, state, manifest):
    directory = Path(directory)
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        **manifest,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "size": len(payload),
    }
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
    try:
        (tmp / STATE_FILE).write_bytes(payload)
        (tmp / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def read_manifest(directory):
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise CheckpointIntegrityError(f"{directory}: no {MANIFEST_FILE}")
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointIntegrityError(f"{path}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointIntegrityError(f"{path}: unsupported version {manifest.get('version')}")
    return manifest


def load_bundle(directory):
    """Return (manifest, state) after verifying the payload checksum."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CheckpointIntegrityError(f"{directory}: checkpoint directory not found")
    manifest = read_manifest(directory)
    state_path = directory / STATE_FILE
    if not state_path.is_file():
        raise CheckpointIntegrityError(f"{directory}: missing {STATE_FILE}")
    payload = state_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointIntegrityError(f"{state_path}: checksum mismatch")
    try:
        state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointIntegrityError(f"{state_path}: cannot decode ({exc})") from None
    return manifest, state
