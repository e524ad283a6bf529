"""
Artifact export for the macrostate toolkit: CSV tables, canonical JSON
reports, SVG figures and the run manifest that chains their checksums
"""
import hashlib
import json
import math
import os
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config import CSV_ENCODING, TOOLKIT_VERSION

MANIFEST_NAME = "run_manifest.json"
WALL_TIME_NAME = "wall_time.txt"


def _jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, Enum):
        return _jsonable(value.value)
    return value


def canonical_json(payload: Any) -> bytes:
    """Sorted keys, fixed separators, trailing newline; byte-stable across runs"""
    text = json.dumps(_jsonable(payload), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return (text + "\n").encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class DataProcessor:
    """Writes run artifacts and keeps the checksum chain for the manifest"""

    def __init__(self, output_dir: str, config_echo: Dict[str, Any], command: str):
        self.output_dir = output_dir
        self.command = command
        self.config_echo = _jsonable(config_echo)
        self.config_sha256 = sha256_hex(canonical_json(self.config_echo))
        self.chain = self.config_sha256
        self.artifacts: List[Dict[str, str]] = []
        # headline numbers echoed into the manifest
        self.summary: Dict[str, Any] = {}
        self._ensure_output_dir()

    def _ensure_output_dir(self) -> None:
        """Create output directory if it doesn't exist"""
        if not os.path.exists(self.output_dir):
            os.makedirs(self.output_dir)

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def provenance(self) -> Dict[str, str]:
        """Stamp embedded in every JSON and SVG artifact"""
        return {
            "toolkit_version": TOOLKIT_VERSION,
            "command": self.command,
            "config_sha256": self.config_sha256,
            "chain": self.chain,
        }

    def _record(self, stage: str, name: str, data: bytes) -> str:
        with open(self._path(name), "wb") as fh:
            fh.write(data)
        digest = sha256_hex(data)
        self.chain = sha256_hex((self.chain + digest).encode("ascii"))
        self.artifacts.append({"stage": stage, "name": name, "sha256": digest})
        return self._path(name)

    def write_json(self, stage: str, name: str, payload: Dict[str, Any]) -> str:
        document = dict(payload)
        document["provenance"] = self.provenance()
        return self._record(stage, name, canonical_json(document))

    def write_csv(self, stage: str, name: str, frame: pd.DataFrame) -> str:
        data = frame.to_csv(index=False, lineterminator="\n", float_format="%.12g").encode(CSV_ENCODING)
        return self._record(stage, name, data)

    def write_svg(self, stage: str, name: str, svg: bytes) -> str:
        return self._record(stage, name, svg)

    def write_wall_time(self, seconds: float) -> str:
        """Kept out of the chain so JSON artifacts stay byte-identical between reruns"""
        path = self._path(WALL_TIME_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{seconds:.3f}\n")
        return path

    def write_manifest(self, status: str = "ok", failed_stage: Optional[str] = None) -> str:
        manifest = {
            "toolkit_version": TOOLKIT_VERSION,
            "command": self.command,
            "config": self.config_echo,
            "config_sha256": self.config_sha256,
            "artifacts": self.artifacts,
            "chain": self.chain,
            "status": status,
            "failed_stage": failed_stage,
            "summary": self.summary,
            "wall_time_file": WALL_TIME_NAME,
        }
        data = canonical_json(manifest)
        path = self._path(MANIFEST_NAME)
        with open(path, "wb") as fh:
            fh.write(data)
        return path
