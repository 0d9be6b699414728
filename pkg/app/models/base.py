import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator


class FrozenModel(BaseModel):
    """Immutable base for the value types shared by the pipelines."""
    model_config = ConfigDict(frozen=True)


class ArrayModel(BaseModel):
    """
    Immutable base for value types that carry numpy arrays.

    Array fields are copied to float64 (or kept integer) and marked read-only
    so instances stay safe to share between workers.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("*", mode="after")
    @classmethod
    def freeze_arrays(cls, value):
        if isinstance(value, np.ndarray):
            value = np.array(value, copy=True)
            value.setflags(write=False)
        return value
