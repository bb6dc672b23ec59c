"""Model bundles: a directory of learner checkpoints plus ``manifest.json``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Union

from .. import __version__
from ..core import CompositionKind, UnitarySchema
from ..learner import GaussianRegressor
from .compositional import AccessCase, CompositionalModel
from .unitary import LogisticModel, UnitaryModel

Model = Union[CompositionalModel, UnitaryModel]


def _write(path: Path, doc: Any) -> str:
    text = json.dumps(doc, separators=(",", ":"), sort_keys=True)
    path.write_text(text + "\n")
    return hashlib.sha256(text.encode()).hexdigest()


def save_model(model: Model, directory: str | Path, **meta: Any) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    if isinstance(model, CompositionalModel):
        manifest: dict[str, Any] = {
            "kind": "compositional",
            "composition": model.composition.value,
            "case": model.case.value,
            "classes": {str(c): d for c, d in sorted(model.class_dims.items())},
            "max_in_degree": model.max_in_degree,
            "n_samples": model.n_samples,
            "representation_dim": model.representation_dim,
            "stochastic": model.stochastic,
        }
        for c, m in sorted(model.models.items()):
            name = f"class_{c}.json"
            files[name] = _write(directory / name, m.to_json())
    else:
        manifest = {"kind": "unitary", "variant": model.variant, "propensity_override": model.propensity_override}
        for key, m in sorted(model.models.items()):
            name = f"{key}.json"
            files[name] = _write(directory / name, m.to_json())
        if model.propensity is not None:
            files["propensity.json"] = _write(directory / "propensity.json", model.propensity.to_json())
    manifest["schema"] = model.schema.to_json()
    manifest["schema_hash"] = model.schema.digest()
    manifest["tool_version"] = __version__
    manifest["files"] = files
    manifest.update(meta)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory: str | Path) -> dict[str, Any]:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_model(directory: str | Path) -> Model:
    directory = Path(directory)
    man = read_manifest(directory)
    schema = UnitarySchema.from_json(man["schema"])

    def load(name: str) -> GaussianRegressor:
        return GaussianRegressor.from_json(json.loads((directory / name).read_text()))

    if man["kind"] == "compositional":
        classes = {int(c): int(d) for c, d in man["classes"].items()}
        models = {int(n.split("_")[1].split(".")[0]): load(n) for n in man["files"] if n.startswith("class_")}
        return CompositionalModel(
            CompositionKind(man["composition"]),
            AccessCase(man["case"]),
            classes,
            int(man["max_in_degree"]),
            schema,
            models,
            int(man["n_samples"]),
            int(man["representation_dim"]),
            bool(man["stochastic"]),
        )
    models = {n.removesuffix(".json"): load(n) for n in man["files"] if n != "propensity.json"}
    prop = None
    if "propensity.json" in man["files"]:
        prop = LogisticModel.from_json(json.loads((directory / "propensity.json").read_text()))
    return UnitaryModel(man["variant"], schema, models, prop, man.get("propensity_override"))
