######################################################################
# Copyright 2016, 2024 John J. Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
######################################################################

"""
Base classes and errors shared by all models
"""

import logging
from dataclasses import asdict, fields

logger = logging.getLogger("flask.app")


class DataValidationError(Exception):
    """Used for data validation errors when reading or building records"""


class CheckpointError(DataValidationError):
    """Used when a checkpoint file cannot be trusted"""


class ConfigError(Exception):
    """Used for invalid configurations"""


######################################################################
#  C O N F I G   B A S E
######################################################################
class ConfigBase:
    """Base class for dataclass configurations that travel as JSON"""

    def serialize(self) -> dict:
        """Convert a configuration into a dictionary"""
        return asdict(self)

    @classmethod
    def deserialize(cls, data: dict):
        """
        Create a configuration from a dictionary

        Args:
            data (dict): the configuration keys, a subset of the dataclass fields
        """
        if not isinstance(data, dict):
            raise ConfigError(f"Invalid {cls.__name__}: expected an object, got {type(data).__name__}")
        known = {field.name for field in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Invalid {cls.__name__}: unknown keys {unknown}")
        try:
            return cls(**data)
        except TypeError as error:
            raise ConfigError(f"Invalid {cls.__name__}: {error}") from error

    def _require(self, condition: bool, message: str) -> None:
        if not condition:
            logger.error("Rejected %s: %s", type(self).__name__, message)
            raise ConfigError(f"Invalid {type(self).__name__}: {message}")
