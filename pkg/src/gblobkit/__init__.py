"""GBlobs feature encoding and LiDAR detection post-processing toolkit."""

from .core import (
    CLASSES,
    DEFAULT_RANGE,
    DEFAULT_VOXEL_SIZE,
    Box3D,
    DataError,
    Detection,
    FormatError,
    FrameRecord,
    GBlobKitError,
    GroundTruthObject,
    InputError,
    PointCloud,
    SchemaError,
    ValidationError,
    normalize_yaw,
)

__version__ = "0.1.0"
