"""
Synthetic 3D segmentation data for desk-scale experiments.

Each volume holds 1-3 randomly placed and rotated ellipsoids or tubes per foreground class on a
smooth background gradient, with a low-contrast band along every shape boundary and additive
Gaussian noise. Label masks are the exact rasterization of the analytic shapes at voxel centres.
"""

from typing import Annotated, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ..errors import ConfigurationError
from ..settings import DataConfig
from ..util import get_basic_logger
from .volume import DatasetSplit, LabelledCase, LabelMask, Volume, check_spatial_shape

logger = get_basic_logger(__name__)

Vec3 = tuple[float, float, float]

MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.4
_MAX_ATTEMPTS = 200

# Shape extents as fractions of the smallest volume side.
_ELLIPSOID_RADII = (0.18, 0.3)
_TUBE_RADIUS = (0.12, 0.16)
_TUBE_LENGTH = (0.5, 0.8)


class Ellipsoid(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["ellipsoid"] = "ellipsoid"
    class_index: int
    centre: Vec3
    radii: Vec3
    rotation: tuple[Vec3, Vec3, Vec3]
    """Rows of the rotation matrix mapping shape axes to volume axes."""

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = (points - np.asarray(self.centre)) @ np.asarray(self.rotation).T
        return np.sum((local / np.asarray(self.radii)) ** 2, axis=-1) <= 1.0


class Tube(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["tube"] = "tube"
    class_index: int
    start: Vec3
    end: Vec3
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.start), np.asarray(self.end)
        axis = b - a
        t = np.clip(((points - a) @ axis) / float(axis @ axis), 0.0, 1.0)
        nearest = a + t[..., None] * axis
        return np.sum((points - nearest) ** 2, axis=-1) <= self.radius**2


Shape = Annotated[Union[Ellipsoid, Tube], Field(discriminator="kind")]


class SyntheticCase(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    volume: Volume
    label: LabelMask
    shapes: list[Shape]


def voxel_centres(size: Sequence[int]) -> np.ndarray:
    """Coordinates of every voxel centre, shape [H, W, D, 3] in index units."""
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in size), indexing="ij")
    return np.stack(grids, axis=-1)


def rasterize(shapes: Sequence[Shape], size: Sequence[int], num_classes: int) -> LabelMask:
    """Label mask of the shapes; shapes of later classes overwrite earlier ones."""
    points = voxel_centres(size)
    classes = np.zeros(tuple(size), dtype=np.uint8)
    for shape in sorted(shapes, key=lambda s: s.class_index):
        classes[shape.contains(points)] = shape.class_index
    return LabelMask(classes=classes, num_classes=num_classes)


def _random_ellipsoid(rng: np.random.Generator, class_index: int, size: np.ndarray) -> Ellipsoid:
    side = size.min()
    radii = rng.uniform(*_ELLIPSOID_RADII, size=3) * side
    reach = radii.max()
    centre = rng.uniform(reach, size - 1 - reach)
    rotation = Rotation.random(random_state=rng).as_matrix()
    return Ellipsoid(
        class_index=class_index,
        centre=tuple(centre),
        radii=tuple(radii),
        rotation=tuple(tuple(row) for row in rotation),
    )


def _random_tube(rng: np.random.Generator, class_index: int, size: np.ndarray) -> Tube | None:
    side = size.min()
    radius = rng.uniform(*_TUBE_RADIUS) * side
    length = rng.uniform(*_TUBE_LENGTH) * side
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    half = 0.5 * length * np.abs(direction) + radius
    low, high = half, size - 1 - half
    if np.any(low > high):
        return None
    centre = rng.uniform(low, high)
    offset = 0.5 * length * direction
    return Tube(class_index=class_index, start=tuple(centre - offset), end=tuple(centre + offset), radius=radius)


def _random_shapes(rng: np.random.Generator, size: np.ndarray, num_classes: int) -> list[Shape]:
    shapes: list[Shape] = []
    for class_index in range(1, num_classes):
        for _ in range(int(rng.integers(1, 4))):
            shape: Shape | None = None
            while shape is None:
                if rng.random() < 0.5:
                    shape = _random_ellipsoid(rng, class_index, size)
                else:
                    shape = _random_tube(rng, class_index, size)  # None when the tube cannot fit
            shapes.append(shape)
    return shapes


def _render_intensities(
    rng: np.random.Generator, label: LabelMask, config: DataConfig, size: np.ndarray
) -> np.ndarray:
    points = voxel_centres(size)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    background = config.gradient_strength * ((points - size / 2) @ direction) / size.min()

    sigma = config.intensity_noise
    image = background.copy()
    structure = ndimage.generate_binary_structure(3, 1)
    for class_index in range(1, label.num_classes):
        region = label.classes == class_index
        if not region.any():
            continue
        band = region & ~ndimage.binary_erosion(region, structure=structure)
        image[region] += class_index * config.contrast
        image[band] = background[band] + (class_index - 1) * config.contrast + config.boundary_gap * sigma
    image += rng.normal(0.0, sigma, size=image.shape)
    image = (image - image.mean()) / image.std()
    return image.astype(np.float32)


def generate_case(seed: int, index: int, config: DataConfig) -> SyntheticCase:
    """
    Generate one synthetic case; a pure function of (seed, index, config).

    Raises:
        ConfigurationError: If the configured size is invalid.
    """
    try:
        check_spatial_shape(tuple(config.size))
    except ValueError as e:
        raise ConfigurationError(str(e)) from e

    rng = np.random.default_rng([seed, index])
    size = np.asarray(config.size, dtype=np.float64)
    label: LabelMask | None = None
    shapes: list[Shape] = []
    for attempt in range(_MAX_ATTEMPTS):
        shapes = _random_shapes(rng, size, config.num_classes)
        label = rasterize(shapes, config.size, config.num_classes)
        if MIN_FOREGROUND <= label.foreground_fraction() <= MAX_FOREGROUND:
            break
        logger.debug("Case %d attempt %d: foreground fraction %.3f out of range", index, attempt, label.foreground_fraction())
    else:
        logger.warning("Case %d: could not reach the foreground range after %d attempts", index, _MAX_ATTEMPTS)
    assert label is not None

    image = _render_intensities(rng, label, config, size)
    volume = Volume(data=image, spacing=config.spacing, id=f"case-{index:04d}")
    return SyntheticCase(volume=volume, label=label, shapes=shapes)


def generate_synthetic_cases(seed: int, start: int, count: int, config: DataConfig) -> list[SyntheticCase]:
    return [generate_case(seed, index, config) for index in range(start, start + count)]


def generate_synthetic_dataset(
    seed: int,
    n_labelled: int,
    n_unlabelled: int,
    n_val: int,
    size: tuple[int, int, int] = (32, 32, 32),
    num_classes: int = 2,
    config: DataConfig | None = None,
) -> DatasetSplit:
    """
    Generate a deterministic semi-supervised split of synthetic volumes.

    Case indices run labelled first, then unlabelled, then validation, so every case is
    reproducible on its own through `generate_case(seed, index, config)`.

    Raises:
        ConfigurationError: If size or class count is invalid.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    try:
        config = (config or DataConfig()).model_copy(
            update={
                "size": tuple(size),
                "num_classes": num_classes,
                "n_labelled": n_labelled,
                "n_unlabelled": n_unlabelled,
                "n_val": n_val,
            }
        )
        check_spatial_shape(tuple(config.size))
    except ValueError as e:
        raise ConfigurationError(str(e)) from e

    labelled = generate_synthetic_cases(seed, 0, n_labelled, config)
    unlabelled = generate_synthetic_cases(seed, n_labelled, n_unlabelled, config)
    val = generate_synthetic_cases(seed, n_labelled + n_unlabelled, n_val, config)
    logger.info(
        "Generated synthetic split seed=%d: %d labelled / %d unlabelled / %d val at %s",
        seed,
        n_labelled,
        n_unlabelled,
        n_val,
        tuple(config.size),
    )
    return DatasetSplit(
        labelled=[LabelledCase(volume=c.volume, label=c.label) for c in labelled],
        unlabelled=[c.volume for c in unlabelled],
        val=[LabelledCase(volume=c.volume, label=c.label) for c in val],
        unlabelled_truth={c.volume.id: c.label for c in unlabelled},
    )


def dataset_from_config(seed: int, config: DataConfig) -> DatasetSplit:
    return generate_synthetic_dataset(
        seed,
        config.n_labelled,
        config.n_unlabelled,
        config.n_val,
        size=config.size,
        num_classes=config.num_classes,
        config=config,
    )
