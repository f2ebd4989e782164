import csv
import enum
import hashlib
import json
import logging
import os
from json import JSONEncoder
from typing import Any, Dict, List

import numpy as np
import yaml
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


class RoundPipeJSONEncoder(JSONEncoder):
    def default(self, obj):
        if isinstance(obj, enum.Enum):
            return obj.value
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        return super().default(obj)


def dump_json(data: Any) -> str:
    """
    Serialize a pydantic model or plain structure to indented JSON. Output is stable for equal inputs.
    :param data: model or dict
    :return: json string
    """
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, cls=RoundPipeJSONEncoder, indent=4)


def write_json(data: Any, path: str):
    with open(path, "w") as file:
        file.write(dump_json(data))
        file.write("\n")


def hash_dictionary(dct: Dict) -> str:
    """
    Hash a dictionary using SHA256 (e.g. for caching)
    :param dct:
    :return:
    """
    return hashlib.sha256(
        json.dumps(
            dct,
            sort_keys=True,
            ensure_ascii=True,
            cls=RoundPipeJSONEncoder,
        ).encode()
    ).hexdigest()


def load_json(path: str):
    with open(path, "r") as file:
        return json.loads(file.read())


def load_structured_file(path: str) -> Any:
    """
    Load a config file. JSON is tried first, then YAML.
    :param path: file path
    :return: parsed content
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file {path} not found")
    with open(path, "r") as file:
        content = file.read()
    try:
        return json.loads(content)
    except json.JSONDecodeError:
        pass
    try:
        data = yaml.load(content, Loader=yaml.FullLoader)
    except yaml.YAMLError:
        raise ConfigError(f"Invalid file format: {path}")
    if not isinstance(data, (dict, list)):
        raise ConfigError(f"Invalid file format: {path}")
    return data


def write_csv(path: str, header: List[str], rows: List[List[Any]]):
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(header)
        writer.writerows(rows)
