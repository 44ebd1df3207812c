"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.
"""

import json
import logging
import os
from typing import Any, List, Set, Tuple, Union

from .errors import ConfigError

logger = logging.getLogger(__name__)


class JSonUtils:
    @staticmethod
    def loadJSON(json_file: str) -> dict:
        """
        Opens JSON file and returns Python dictionary.
        """
        logger.debug("Loading JSON file %s", json_file)
        if not os.path.isfile(json_file):
            raise ConfigError(f"The JSon file {json_file} does not exist.")
        try:
            with open(json_file, "r", encoding="utf-8") as json_handle:
                json_value = json.load(json_handle)
        except json.JSONDecodeError as error:
            raise ConfigError(f"The JSon file {json_file} is invalid: {error}.") from error
        if not isinstance(json_value, dict):
            raise ConfigError(f"The JSon file {json_file} does not hold an object.")
        return json_value

    @staticmethod
    def saveJSON(dictionary: dict, file_path: str):
        """
        Saves Python dictionary to JSON file with sorted keys, so equal content gives equal bytes.
        """
        folder = os.path.dirname(file_path)
        if folder and not os.path.isdir(folder):
            os.makedirs(folder, exist_ok=True)
        with open(file_path, "w", encoding="utf-8", newline="\n") as json_handle:
            json.dump(dictionary, json_handle, indent=2, sort_keys=True)
            json_handle.write("\n")

    @staticmethod
    def dumpCanonical(value: Any) -> str:
        return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=True)

    @staticmethod
    def getSchemaDefs(schema: dict) -> dict:
        """
        Returns definitions of a schema, solving possible intra-references.
        """

        def get_schema_defs_recursive(schema: Union[dict, list, Any]) -> List[dict]:
            definitions = []
            if isinstance(schema, dict) and "$defs" in schema:
                definitions.append(schema["$defs"])
            elif isinstance(schema, list):
                for value in schema:
                    definitions.extend(get_schema_defs_recursive(value))
            elif isinstance(schema, dict):
                for value in schema.values():
                    definitions.extend(get_schema_defs_recursive(value))
            return definitions

        found = get_schema_defs_recursive(schema)
        if not found:
            return {}
        definitions = found[0]
        references: Set[str] = set()
        while True:
            new_definitions, replaced_references = JSonUtils.solveSchemaRefs(definitions, definitions, set())
            if new_definitions == definitions:
                return definitions
            if references == replaced_references:
                raise ConfigError("Circular dependency in schema definitions.")
            references = replaced_references
            definitions = new_definitions

    @staticmethod
    def solveSchemaRefs(schema: Union[dict, list, Any], schema_defs: dict,
                        replaced_definitions: Set[str]) -> Tuple[Any, Set[str]]:
        """
        Solves a schema, replacing references by their definition values. Keys next to
        a $ref are kept and win over the definition's own entries.
        """
        if isinstance(schema, dict):
            dict_out = {}
            if "$ref" in schema:
                ref_key = str(schema["$ref"]).split("#/$defs/")[-1]
                if ref_key not in schema_defs:
                    raise ConfigError(f"Definition {ref_key} for reference not found.")
                definition = schema_defs[ref_key]
                if str(definition.get("$ref", "")).split("#/$defs/")[-1] == ref_key:
                    raise ConfigError(f"Reference {ref_key} leads to its own definition.")
                replaced_definitions.add(ref_key)
                dict_out.update(definition)
            for k, v in schema.items():
                if k == "$ref":
                    continue
                dict_out[k], replaced_definitions = JSonUtils.solveSchemaRefs(v, schema_defs, replaced_definitions)
            return dict_out, replaced_definitions
        if isinstance(schema, list):
            list_out = []
            replaced_in_list: Set[str] = set(replaced_definitions)
            for value in schema:
                solved, replaced = JSonUtils.solveSchemaRefs(value, schema_defs, set(replaced_definitions))
                list_out.append(solved)
                replaced_in_list.update(replaced)
            return list_out, replaced_in_list
        return schema, replaced_definitions
