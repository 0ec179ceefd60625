"""Text-guided domain adaptation of style-based generators."""
from .embedding import (ClipBackend, DegenerateDirectionError, DirectionVector, EmbeddingBackend,
                        MockBackend, embed_image, embed_text, preprocess_image, text_direction)
from .generator import (CheckpointSnapshot, GeneratorConfig, GeneratorPair, StyleGenerator, broadcast_w,
                        clone_pair, interpolate_weights, load_checkpoint, map_to_w, mixed_codes, sample_z,
                        save_checkpoint, set_trainable_layers, synthesize)
from .losses import (directional_clip_loss, embedding_norm_loss, fewshot_image_direction, global_clip_loss,
                     masked_directional_loss, outside_mask_consistency)
from .layer_selection import LayerRanking, rank_layers, select_top_k
from .trainer import AdaptationConfig, PRESETS, adapt, training_step, snapshot_grid
from .mapper import LatentMapper, MapperConfig, apply_mapper, train_mapper

__version__ = "0.1.0"
