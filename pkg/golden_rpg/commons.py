"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.
"""

import base64
import hashlib
import logging
import os
from typing import Dict, List, Optional

from .json_utils import JSonUtils

logger = logging.getLogger(__name__)


class GoldenRPG:
    PACKAGE_FOLDER = os.path.dirname(__file__)
    RESOURCES_FOLDER = os.path.join(os.path.dirname(__file__), "resources")
    PRESETS_FOLDER = os.path.join(RESOURCES_FOLDER, "presets")
    DEFAULT_CONFIG_PATH = os.path.join(RESOURCES_FOLDER, "default_config.json")
    SCHEMA_PATH = os.path.join(RESOURCES_FOLDER, "config_schema.json")
    VOCABULARY_PATH = os.path.join(RESOURCES_FOLDER, "vocabulary.json")
    METADATA_PATH = os.path.join(RESOURCES_FOLDER, "metadata.json")

    DETERMINISTIC_ENV = "GRPG_DETERMINISTIC"
    CONFIG_ENV = "GRPG_CONFIG"

    __schema_solved: Dict = {}

    @classmethod
    def loadSchema(cls):
        """
        Reads the config schema and keeps it with every $ref replaced by its definition.
        """
        schema = JSonUtils.loadJSON(cls.SCHEMA_PATH)
        schema_defs = JSonUtils.getSchemaDefs(schema)
        schema_solved, _ = JSonUtils.solveSchemaRefs(schema, schema_defs, set())
        schema_solved.pop("$defs", None)
        cls.__schema_solved.clear()
        cls.__schema_solved.update(schema_solved)

    @classmethod
    def getSolvedSchema(cls) -> dict:
        if not cls.__schema_solved:
            cls.loadSchema()
        return cls.__schema_solved

    __metadata: Dict = {}

    @classmethod
    def loadMetadata(cls) -> bool:
        """
        Reads the package metadata file holding name and version.
        Returns False if the file is missing or unreadable.
        """
        if not os.path.isfile(cls.METADATA_PATH):
            return False
        try:
            metadata = JSonUtils.loadJSON(cls.METADATA_PATH)
        except Exception:
            logger.warning("Unable to read metadata file %s", cls.METADATA_PATH)
            return False
        cls.__metadata.clear()
        cls.__metadata.update(metadata)
        return True

    @classmethod
    def getMetadata(cls) -> dict:
        if not cls.__metadata:
            cls.loadMetadata()
        return cls.__metadata

    @classmethod
    def getVersion(cls) -> str:
        return str(cls.getMetadata().get("version", "0.0.0"))

    __vocabulary: Dict = {}

    @classmethod
    def getVocabulary(cls) -> dict:
        if not cls.__vocabulary:
            cls.__vocabulary.update(JSonUtils.loadJSON(cls.VOCABULARY_PATH))
        return cls.__vocabulary

    @classmethod
    def getPresetPath(cls, name: str) -> str:
        return os.path.join(cls.PRESETS_FOLDER, f"{name}.json")

    @classmethod
    def listPresets(cls) -> List[str]:
        if not os.path.isdir(cls.PRESETS_FOLDER):
            return []
        return sorted(os.path.splitext(f)[0] for f in os.listdir(cls.PRESETS_FOLDER) if f.endswith(".json"))

    @classmethod
    def isDeterministic(cls) -> bool:
        return os.environ.get(cls.DETERMINISTIC_ENV, "") == "1"

    @classmethod
    def getWorkerCount(cls, requested: int = 0) -> int:
        """
        Worker threads for per-record parallel loops. One in deterministic mode,
        otherwise the requested count or the CPU count when 0.
        """
        if cls.isDeterministic():
            return 1
        if requested > 0:
            return requested
        return max(1, min(8, os.cpu_count() or 1))

    @classmethod
    def getConfigOverridePath(cls) -> Optional[str]:
        path = os.environ.get(cls.CONFIG_ENV, "")
        return path or None

    @staticmethod
    def signature(*parts: str) -> str:
        """
        base64 of the sha1 digest of the concatenated parts.
        """
        hash_object = hashlib.sha1(str.encode("".join(parts)))
        return base64.b64encode(hash_object.digest()).decode()
