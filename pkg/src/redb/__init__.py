"""Reliable, diverse, class-balanced pseudo-label curation for 3D detection.

The package turns raw detector output on an unlabeled target domain into a
curated self-training dataset and drives the alternating labeling/training
loop against any detector speaking the redb/1 line protocol:

- :mod:`redb.geom` - oriented-box IoU (exact polygon clipping), NMS
- :mod:`redb.cloud` - point clouds, labels, manifests, crop/remove/paste
- :mod:`redb.proto` - the detector wire protocol and handles
- :mod:`redb.cde` - cross-domain examination of pseudo-label reliability
- :mod:`redb.obc` - overlapped-box counting, KDE, inverse-density sampling
- :mod:`redb.balance` - object pools and class-balanced injection
- :mod:`redb.pipeline` - the alternating rounds orchestrator
- :mod:`redb.sim` - synthetic two-domain test bed and mock detector
"""

from .balance import ObjectPool, RoundSchedule, advance_schedule, build_gt_pool, \
    inject, sample_balanced
from .cde import CdeConfig, CdeVerdict, build_examination_scene, examine, match
from .cloud import (
    FrameManifest,
    LabelSet,
    ManifestEntry,
    ObjectBankEntry,
    crop_object_points,
    paste,
    read_labels,
    read_manifest,
    read_points,
    remove_points_in_boxes,
    ros_scale,
    write_labels,
    write_manifest,
    write_points,
)
from .geom import BevPolygon, Box3D, bev_corners, bev_iou, convex_intersection_area, \
    iou_3d, nms, point_in_box
from .obc import KdeModel, ObcConfig, collect_obc, count_obc, downsample, kde_eval, kde_fit
from .pipeline import PipelineConfig, RoundReport, load_config, run
from .proto import DetectorHandle, InferenceResult, InProcessDetector, SubprocessDetector, \
    filter_confident, launch_detector
from .sim import DomainSpec, MockDetector, MockDetectorSpec, evaluate, generate_domain

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
