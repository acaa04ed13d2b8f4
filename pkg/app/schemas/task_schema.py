from pydantic import BaseModel, ConfigDict, model_validator

from app.exception.exce import SpecError


class TaskSpec(BaseModel):
    """Knobs of the synthetic open-vocabulary adaptation task."""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = 10
    concept_dim: int = 16
    input_dim: int = 32
    source_pairs_per_class: int = 50
    target_images_per_class: int = 50
    k_text_prompts: int = 8
    text_noise_sigma: float = 0.15
    image_noise_sigma: float = 0.1
    shift_strength: float = 0.5
    prompt_failure_rate: float = 0.1
    seed: int = 42

    @model_validator(mode="after")
    def _check(self) -> "TaskSpec":
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.concept_dim < 2 or self.input_dim < 2:
            raise SpecError("concept_dim and input_dim must be >= 2")
        for name in ("source_pairs_per_class", "target_images_per_class", "k_text_prompts"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.text_noise_sigma < 0 or self.image_noise_sigma < 0:
            raise SpecError("noise sigmas must be >= 0")
        if self.shift_strength < 0:
            raise SpecError(f"shift_strength must be >= 0, got {self.shift_strength}")
        if not 0.0 <= self.prompt_failure_rate < 1.0:
            raise SpecError(
                f"prompt_failure_rate must lie in [0, 1), got {self.prompt_failure_rate}"
            )
        if self.seed < 0:
            raise SpecError(f"seed must be non-negative, got {self.seed}")
        return self
