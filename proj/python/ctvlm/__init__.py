# Copyright 2026 The ctvlm Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""CT vision-language classification and segmentation.

Thin wrappers over the compiled core. Pipeline functions accept config
overrides as a dict with the same layout as a run config file.
"""

import json
from typing import Any, Mapping, Optional

from ._core import (
    Error,
    IngestionError,
    Model,
    NumericFault,
    SchemaError,
    ShapeError,
    aupr,
    auroc,
    delong_ci,
    delong_paired_pvalue,
    focal_loss,
    load_volume,
    lr_schedule,
    patchify_mask,
    prepare_input,
    task_description,
    task_keys,
    tokenize,
    unpack_mask,
)
from . import _core

__all__ = [
    "Error",
    "IngestionError",
    "Model",
    "NumericFault",
    "SchemaError",
    "ShapeError",
    "aupr",
    "auroc",
    "delong_ci",
    "delong_paired_pvalue",
    "evaluate",
    "export_seg",
    "focal_loss",
    "load_volume",
    "lr_schedule",
    "patchify_mask",
    "prepare",
    "prepare_input",
    "task_description",
    "task_keys",
    "tokenize",
    "train",
    "unpack_mask",
]


def _dump(overrides: Optional[Mapping[str, Any]]) -> str:
    return json.dumps(dict(overrides or {}))


def prepare(run_dir, config=None, overrides: Optional[Mapping[str, Any]] = None) -> dict:
    """Frames every manifest record into the run cache and writes the task mix."""
    return _core.prepare(str(run_dir), None if config is None else str(config), _dump(overrides))


def train(run_dir, config=None, overrides: Optional[Mapping[str, Any]] = None) -> dict:
    """Trains from the prepared cache and selects the best checkpoint."""
    return _core.train(str(run_dir), None if config is None else str(config), _dump(overrides))


def evaluate(run_dir, split: str = "test", checkpoint=None, config=None,
             overrides: Optional[Mapping[str, Any]] = None) -> dict:
    """Scores a split and returns the evaluation report."""
    text = _core.evaluate(str(run_dir), split, None if checkpoint is None else str(checkpoint),
                          None if config is None else str(config), _dump(overrides))
    return json.loads(text)


def export_seg(run_dir, split: str = "test", checkpoint=None, config=None,
               overrides: Optional[Mapping[str, Any]] = None) -> int:
    """Writes thresholded segmentation masks; returns how many were written."""
    return _core.export_seg(str(run_dir), split, None if checkpoint is None else str(checkpoint),
                            None if config is None else str(config), _dump(overrides))
