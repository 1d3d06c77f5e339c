import configparser
import os
from typing import Any, Dict, Optional

from prompts import available_versions
from strategies import STRATEGY_NAMES, StrategySettings
from user_simulator import DEFAULT_STOP_TOKEN, FaultProfile

CONFIG_PATH = "config.ini"

DEFAULTS = {
    "Run": {
        "suite": "data/mini_retail_suite.json",
        "strategy": "function_calling",
        "trials": "5",
        "max_turns": "30",
        "max_actions_per_turn": "30",
        "parallelism": "1",
        "seed": "0",
        "out": "results",
        "include_aborted": "False",
        "rerun_budget": "2",
        "progress": "True",
    },
    "Provider": {"kind": "scripted", "scripts": "data/scripts", "endpoint": "default"},
    "endpoint.default": {
        "base_url": "https://api.openai.com/v1",
        "api_key_env": "OPENAI_API_KEY",
        "model": "gpt-4o",
        "user_model": "gpt-4o",
        "assistant_temperature": "0.0",
        "subagent_temperature": "0.0",
        "max_output_tokens": "1024",
        "max_attempts": "3",
        "timeout": "60",
    },
    "IRMA": {"memory": "True", "constraints": "True", "tools": "True", "suggestion_cap": "3",
             "assistant_prompt": "fact"},
    "FACT": {"backbone": "react"},
    "UserSim": {"stop_token": DEFAULT_STOP_TOKEN, "greeting": "Hi! How can I help you today?"},
    "Faults": {},
    "Prompts": {"version": "v1"},
}


class ConfigError(ValueError):
    """Invalid config value; the message starts with its Section.key path."""


def _parser() -> configparser.ConfigParser:
    config = configparser.ConfigParser(interpolation=None)
    # Fault keys are task ids and keep their case.
    config.optionxform = str
    return config


def default_config() -> configparser.ConfigParser:
    config = _parser()
    config.read_dict(DEFAULTS)
    return config


def load_config(path: str = CONFIG_PATH) -> configparser.ConfigParser:
    """Read the config file, creating it with defaults if it does not exist."""
    if not os.path.exists(path):
        save_config_file(default_config(), path)

    config = default_config()
    try:
        config.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return config


def save_config_file(config: configparser.ConfigParser, path: str = CONFIG_PATH):
    with open(path, "w", encoding="utf-8") as configfile:
        config.write(configfile)


# Typed access

def _get(config, section: str, key: str) -> str:
    if not config.has_option(section, key):
        raise ConfigError(f"{section}.{key}: missing")
    return config.get(section, key)


def get_int(config, section: str, key: str, minimum: Optional[int] = None) -> int:
    try:
        value = config.getint(section, key)
    except ValueError:
        raise ConfigError(f"{section}.{key}: must be an integer, got {_get(config, section, key)!r}")
    except (configparser.NoSectionError, configparser.NoOptionError):
        raise ConfigError(f"{section}.{key}: missing")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{section}.{key}: must be >= {minimum}, got {value}")
    return value


def get_float(config, section: str, key: str) -> float:
    try:
        return config.getfloat(section, key)
    except ValueError:
        raise ConfigError(f"{section}.{key}: must be a number, got {_get(config, section, key)!r}")
    except (configparser.NoSectionError, configparser.NoOptionError):
        raise ConfigError(f"{section}.{key}: missing")


def get_bool(config, section: str, key: str) -> bool:
    try:
        return config.getboolean(section, key)
    except ValueError:
        raise ConfigError(f"{section}.{key}: must be true or false, got {_get(config, section, key)!r}")
    except (configparser.NoSectionError, configparser.NoOptionError):
        raise ConfigError(f"{section}.{key}: missing")


def endpoint_settings(config, name: str) -> Dict[str, Any]:
    section = f"endpoint.{name}"
    if not config.has_section(section):
        raise ConfigError(f"{section}: no such endpoint section")
    return {
        "base_url": _get(config, section, "base_url"),
        "api_key_env": _get(config, section, "api_key_env"),
        "model": _get(config, section, "model"),
        "user_model": config.get(section, "user_model", fallback="") or _get(config, section, "model"),
        "assistant_temperature": get_float(config, section, "assistant_temperature"),
        "subagent_temperature": get_float(config, section, "subagent_temperature"),
        "max_output_tokens": get_int(config, section, "max_output_tokens", minimum=1),
        "max_attempts": get_int(config, section, "max_attempts", minimum=1),
        "timeout": get_float(config, section, "timeout"),
    }


def fault_profiles(config) -> Dict[str, FaultProfile]:
    if not config.has_section("Faults"):
        return {}
    faults = {}
    for task_id, spec in config.items("Faults"):
        try:
            faults[task_id] = FaultProfile.parse(spec)
        except ValueError as e:
            raise ConfigError(f"Faults.{task_id}: {e}") from e
    return faults


def prompt_version(config) -> str:
    version = _get(config, "Prompts", "version")
    versions = available_versions()
    if version not in versions:
        raise ConfigError(f"Prompts.version: unknown prompt version {version!r} "
                          f"(available: {', '.join(versions) or 'none'})")
    return version


def strategy_settings(config, endpoint: Optional[Dict[str, Any]] = None) -> StrategySettings:
    """StrategySettings from [IRMA], [FACT], [Prompts] and the endpoint's model settings."""
    endpoint = endpoint or {}
    try:
        return StrategySettings(
            model=endpoint.get("model", ""),
            assistant_temperature=endpoint.get("assistant_temperature", 0.0),
            subagent_temperature=endpoint.get("subagent_temperature", 0.0),
            max_output_tokens=endpoint.get("max_output_tokens", 1024),
            prompt_version=prompt_version(config),
            fact_backbone=_get(config, "FACT", "backbone"),
            irma_memory=get_bool(config, "IRMA", "memory"),
            irma_constraints=get_bool(config, "IRMA", "constraints"),
            irma_tools=get_bool(config, "IRMA", "tools"),
            irma_prompt=_get(config, "IRMA", "assistant_prompt"),
            suggestion_cap=get_int(config, "IRMA", "suggestion_cap", minimum=1),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"IRMA/FACT: {e}") from e


def check_strategy(config) -> str:
    name = _get(config, "Run", "strategy")
    if name not in STRATEGY_NAMES:
        raise ConfigError(f"Run.strategy: unknown strategy {name!r} (expected one of {', '.join(STRATEGY_NAMES)})")
    return name
