"""One prompt-optimization step: ask the optimizer model for a refined template."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from recprompt.gateway import ChatRequest, Gateway, Message
from recprompt.prompts import (
    END_TEMPLATE,
    START_TEMPLATE,
    ExtractionError,
    OptimizationContext,
    TemplateError,
    TemplateInstruction,
    build_optimization_prompt,
    extract_template_from_optimizer_output,
)

logger = logging.getLogger(__name__)

CORRECTIVE_MESSAGE = (
    f"Your previous answer could not be used. Reply with the full template instruction between "
    f"{START_TEMPLATE} and {END_TEMPLATE}, keeping ${{history}} and ${{candidate}} exactly once each."
)


@dataclass
class OptimizerConfig:
    model: str = "gpt-4-1106-preview"
    temperature: float = 1.0
    max_tokens: int = 2048
    max_attempts: int = 3


class OptimizationStepError(RuntimeError):
    def __init__(self, message: str, raw_outputs: list[str]):
        self.raw_outputs = raw_outputs
        super().__init__(message)


def optimize_step(
    ctx: OptimizationContext,
    gateway: Gateway,
    config: OptimizerConfig | None = None,
    iteration: int = 1,
    created_at: str = "",
) -> TemplateInstruction:
    config = config or OptimizerConfig()
    messages = [Message("user", build_optimization_prompt(ctx))]
    raw_outputs = []
    errors = []
    for attempt in range(1, config.max_attempts + 1):
        request = ChatRequest(
            "optimizer", config.model, tuple(messages), config.temperature, config.max_tokens,
            salt=f"iteration-{iteration}",
        )
        text = gateway.complete(request).content
        raw_outputs.append(text)
        try:
            return extract_template_from_optimizer_output(
                text, provenance=f"optimizer@iteration-{iteration}", created_at=created_at
            )
        except (ExtractionError, TemplateError) as exc:
            logger.info("optimizer attempt %d rejected: %s", attempt, exc)
            errors.append(str(exc))
            messages += [Message("assistant", text), Message("user", CORRECTIVE_MESSAGE)]
    raise OptimizationStepError(
        f"no valid template after {config.max_attempts} attempts: {'; '.join(errors)}", raw_outputs
    )
