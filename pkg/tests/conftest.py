import json

import pytest

from pancseg.forest import TrainConfig
from pancseg.phantom import PhantomSpec, generate_phantoms
from pancseg.pipeline import RunConfig, crossval
from pancseg.volumes import load_manifest

# small phantoms keep end-to-end tests quick; a larger pancreas keeps both
# superpixel classes present at this size
SMALL_SPEC = PhantomSpec(dims=(64, 64, 12), pancreas_fraction=(0.02, 0.04))
SENTINEL = "sentinel_zz9"


def small_config(**kw):
    t = TrainConfig(n_trees=8)
    return RunConfig(c1=t, c2=t, c3=t, **kw)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """Six small phantoms, one per fold, with case 2 renamed to a sentinel tag."""
    d = tmp_path_factory.mktemp("phantoms")
    generate_phantoms(SMALL_SPEC, 6, d)
    doc = json.loads((d / "manifest.json").read_text())
    doc["entries"][2]["case"] = SENTINEL
    (d / "manifest.json").write_text(json.dumps(doc, indent=2))
    return load_manifest(d / "manifest.json")


@pytest.fixture(scope="session")
def small_crossval(small_manifest, tmp_path_factory):
    work = tmp_path_factory.mktemp("cv")
    result = crossval(small_manifest, small_config(), work, work / "summary.csv")
    return work, result
