# mcp_server.py
"""
MCP server exposing brushgym commands as tools (stdio transport).

Every tool runs one Orchestrator command against its own output directory and
returns a {"success": ...} dict instead of raising, so a client can show the
error message as-is.
"""
import asyncio
import logging
import os
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from mcp.server.fastmcp import FastMCP
from pydantic import BaseModel, Field

from config import RunConfig, apply_overrides, dotted_overrides, load_config
from errors import BrushGymError
from orchestrator import Orchestrator

load_dotenv()

# Configure logging
logging.basicConfig(level=os.getenv("BRUSHGYM_LOG_LEVEL", "INFO").upper())
logger = logging.getLogger(__name__)


class Settings(BaseModel):
    log_level: str = Field(default=os.getenv("BRUSHGYM_LOG_LEVEL", "info").lower())


settings = Settings()
mcp = FastMCP("brushgym", log_level=settings.log_level.upper())


def _config(overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    return apply_overrides(load_config(os.getenv("BRUSHGYM_CONFIG")), dotted_overrides(overrides or {}))


def _failure(e: Exception, **extra: Any) -> Dict[str, Any]:
    if isinstance(e, BrushGymError):
        return {"success": False, "error": e.message, "exit_code": e.exit_code, **e.details, **extra}
    logger.exception("brushgym tool failed")
    return {"success": False, "error": f"Unexpected error: {str(e)}", "exit_code": 1, **extra}


async def _run(output_dir: str, seed: Optional[int], overrides: Optional[Dict[str, Any]], command) -> Dict[str, Any]:
    def work():
        with Orchestrator(_config(overrides), output_dir=output_dir, seed=seed) as orchestrator:
            return command(orchestrator)
    return await asyncio.to_thread(work)


@mcp.tool()
async def paint_reference(checkpoint: str, reference: str, output_dir: str,
                          max_strokes: Optional[int] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """Paint a reference image (PNG/PPM) with a policy checkpoint; writes rollout.png and strokes.json."""
    try:
        summary = await _run(output_dir, seed, None,
                             lambda o: o.cmd_rollout(checkpoint, reference, max_strokes))
        return {"success": True, "output_dir": output_dir, **summary}
    except Exception as e:
        return _failure(e, checkpoint=checkpoint, reference=reference)


@mcp.tool()
async def calibrate_brush(output_dir: str, a_step: Optional[float] = None, one_sided: bool = False,
                          strokes: Optional[str] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """Run pressure and projection calibration against the simulated brush."""
    overrides = {"calibration.a_step": a_step, "calibration.one_sided": one_sided or None}
    try:
        summary = await _run(output_dir, seed, overrides, lambda o: o.cmd_calibrate(strokes))
        return {"success": True, "output_dir": output_dir, **summary}
    except Exception as e:
        return _failure(e)


@mcp.tool()
async def export_strokes(strokes: str, calibration: str, output_dir: str,
                         seed: Optional[int] = None) -> Dict[str, Any]:
    """Turn a strokes.json and a calibration.json into a robot trajectory CSV."""
    try:
        summary = await _run(output_dir, seed, None, lambda o: o.cmd_export(strokes, calibration))
        return {"success": True, "output_dir": output_dir, **summary}
    except Exception as e:
        return _failure(e, strokes=strokes, calibration=calibration)


@mcp.tool()
async def evaluate_checkpoints(checkpoints: List[str], output_dir: str, patches: Optional[int] = None,
                               seed: Optional[int] = None) -> Dict[str, Any]:
    """Evaluate checkpoints on the same seeded patches and return the report rows."""
    try:
        report = await _run(output_dir, seed, {"eval.patches": patches}, lambda o: o.cmd_eval(checkpoints))
        return {"success": True, "rows": [row.model_dump() for row in report.rows],
                "corpus": report.corpus, "markdown": report.to_markdown()}
    except Exception as e:
        return _failure(e, rows=[])


@mcp.tool()
async def get_config_defaults() -> Dict[str, Any]:
    """The resolved configuration the other tools run with."""
    try:
        return {"success": True, "config": _config().model_dump(mode="json")}
    except Exception as e:
        return _failure(e, config=None)


if __name__ == "__main__":
    mcp.run(transport="stdio")
