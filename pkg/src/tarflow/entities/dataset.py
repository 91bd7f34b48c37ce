import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Dataset(BaseModel):
    """Images scaled to [-1, 1], optionally with integer class labels."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = Field(description="Where the images came from.")
    images: np.ndarray = Field(description="(M, C, H, W) float64 array.")
    labels: np.ndarray | None = Field(
        default=None, description="(M,) int64 class labels."
    )
    num_classes: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "Dataset":
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(
                f"images must be a non-empty (M, C, H, W) array, "
                f"got shape {self.images.shape}"
            )
        if self.labels is not None:
            if self.labels.shape != (len(self.images),):
                raise ValueError(
                    f"expected {len(self.images)} labels, "
                    f"got shape {self.labels.shape}"
                )
            if self.num_classes == 0:
                self.num_classes = int(self.labels.max()) + 1
        return self

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return (int(c), int(h), int(w))
