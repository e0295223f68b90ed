import numpy as np
import pytest

from geal.feature_store import ImageRecord
from geal.knowledge_clusters import ClusterRecord, write_cluster_file
from geal.selector import ClusterPool


def make_record(image_id, attention, patches, global_feature=None):
    patches = np.asarray(patches, dtype=np.float32)
    attention = np.asarray(attention, dtype=np.float32)
    if global_feature is None:
        global_feature = attention.astype(np.float64) @ patches.astype(np.float64)
    return ImageRecord(image_id, attention, patches, global_feature)


def random_record(rng, image_id, regions, dim, scale=1.0):
    att = rng.random(regions)
    att /= att.sum()
    patches = rng.standard_normal((regions, dim)) * scale
    return make_record(image_id, att, patches)


def pool_from_centroids(tmp_path, centroid_sets, name="pool.kc"):
    """Build a cluster file + ClusterPool from {image_id: KxD array} pairs."""
    path = tmp_path / name
    dim = np.asarray(next(iter(centroid_sets.values()))).shape[1]
    recs = [
        ClusterRecord(
            image_id,
            np.asarray(c, dtype=np.float32),
            np.ones(np.asarray(c).shape[0], dtype=np.uint32),
        )
        for image_id, c in centroid_sets.items()
    ]
    write_cluster_file(recs, dim, path)
    return path, ClusterPool.load(path)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
