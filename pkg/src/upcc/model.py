"""Sentiment classifier variants over the shared encoder.

Variants form the ablation ladder:

  text_only          encoder + linear head on the document summary
  vanilla_up         + trainable user/product rows (random init) attending
                       over the token states, raw rows fed to the classifier
  textual_init       vanilla architecture, rows initialized from pooled
                       historical-review encodings
  full_cross_context + fusion of entity row with the document summary, four
                       entity-to-entity attentions (user~user, product~product,
                       user~product, product~user) and a 9-piece combiner

In the entity-to-entity attentions of the full variant, a query never attends
to its own matrix row (self-exclusion mask); with a single entity that leaves
no keys and the attention output is the zero vector by convention. Unknown
entity ids at evaluation time are routed to the mean row of the matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderConfig, EncoderOutput, MultiHeadAttention, TransformerEncoder


class Variant(str, enum.Enum):
    TEXT_ONLY = "text_only"
    VANILLA_UP = "vanilla_up"
    TEXTUAL_INIT = "textual_init"
    FULL_CROSS_CONTEXT = "full_cross_context"

    @property
    def uses_entities(self) -> bool:
        return self is not Variant.TEXT_ONLY

    @property
    def uses_cache(self) -> bool:
        return self in (Variant.TEXTUAL_INIT, Variant.FULL_CROSS_CONTEXT)


COLD_INDEX = -1  # entity id unknown to the model; resolved to the mean row


@dataclass(frozen=True)
class ForwardTrace:
    """All intermediates of one full-variant forward pass (testing surface)."""
    cls_state: torch.Tensor
    fused_user: torch.Tensor
    fused_product: torch.Tensor
    user_to_user: torch.Tensor
    product_to_product: torch.Tensor
    user_to_product: torch.Tensor
    product_to_user: torch.Tensor
    user_to_doc: torch.Tensor
    product_to_doc: torch.Tensor
    combined: torch.Tensor
    logits: torch.Tensor


class SentimentModel(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, num_classes: int,
                 variant: Variant, num_users: int = 0, num_products: int = 0,
                 cross_heads: int = 4):
        super().__init__()
        variant = Variant(variant)
        self.variant = variant
        self.num_classes = num_classes
        self.encoder = TransformerEncoder(encoder_cfg)
        h = encoder_cfg.hidden_size
        if variant is Variant.TEXT_ONLY:
            self.classifier = nn.Linear(h, num_classes)
            return
        if min(num_users, num_products) < 1:
            raise ValueError("entity variants need num_users and num_products")
        self.user_matrix = nn.Parameter(torch.zeros(num_users, h))
        self.product_matrix = nn.Parameter(torch.zeros(num_products, h))
        self.attn_user_doc = MultiHeadAttention(h, cross_heads)
        self.attn_product_doc = MultiHeadAttention(h, cross_heads)
        if variant is Variant.FULL_CROSS_CONTEXT:
            self.fuse_user = nn.Linear(2 * h, h)
            self.fuse_product = nn.Linear(2 * h, h)
            self.attn_user_user = MultiHeadAttention(h, cross_heads)
            self.attn_product_product = MultiHeadAttention(h, cross_heads)
            self.attn_user_product = MultiHeadAttention(h, cross_heads)
            self.attn_product_user = MultiHeadAttention(h, cross_heads)
            self.classifier = nn.Linear(9 * h, num_classes)
        else:
            self.classifier = nn.Linear(5 * h, num_classes)

    # -- entity row lookup ---------------------------------------------------

    def _rows(self, matrix: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        """Rows for idx, with COLD_INDEX mapped to the matrix mean row."""
        cold = idx == COLD_INDEX
        rows = matrix[idx.clamp(min=0)]
        if bool(cold.any()):
            rows = torch.where(cold[:, None], matrix.mean(dim=0), rows)
        return rows

    @staticmethod
    def _self_mask(idx: torch.Tensor, n: int) -> torch.Tensor:
        """(B, 1, n) key mask blocking each query's own row; no-op for cold ids."""
        mask = torch.zeros(idx.shape[0], 1, n, dtype=torch.bool)
        valid = idx >= 0
        mask[valid, 0, idx[valid]] = True
        return mask

    # -- forward paths ---------------------------------------------------------

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor,
                user_idx: torch.Tensor | None = None,
                product_idx: torch.Tensor | None = None) -> torch.Tensor:
        states = self.encoder(ids, pad_mask)          # (B, L, h)
        cls_state = states[:, 0]
        if self.variant is Variant.TEXT_ONLY:
            return self.classifier(cls_state)
        if user_idx is None or product_idx is None:
            raise ValueError(f"variant {self.variant.value} needs entity indices")
        doc_key_mask = pad_mask[:, None, :]
        user_rows = self._rows(self.user_matrix, user_idx)
        product_rows = self._rows(self.product_matrix, product_idx)
        if self.variant is Variant.FULL_CROSS_CONTEXT:
            q_user = self.fuse_user(torch.cat([user_rows, cls_state], dim=-1))
            q_product = self.fuse_product(torch.cat([product_rows, cls_state], dim=-1))
            users, products = self.user_matrix, self.product_matrix
            uu = self.attn_user_user(q_user[:, None], users, users,
                                     self._self_mask(user_idx, users.shape[0]))[:, 0]
            pp = self.attn_product_product(q_product[:, None], products, products,
                                           self._self_mask(product_idx, products.shape[0]))[:, 0]
            up = self.attn_user_product(q_user[:, None], products, products)[:, 0]
            pu = self.attn_product_user(q_product[:, None], users, users)[:, 0]
            ud = self.attn_user_doc(q_user[:, None], states, states, doc_key_mask)[:, 0]
            pd = self.attn_product_doc(q_product[:, None], states, states, doc_key_mask)[:, 0]
            combined = torch.cat([uu, pp, up, pu, ud, pd, q_user, q_product, cls_state], dim=-1)
            return self.classifier(combined)
        # vanilla_up / textual_init: raw rows as queries, no cross-context
        ud = self.attn_user_doc(user_rows[:, None], states, states, doc_key_mask)[:, 0]
        pd = self.attn_product_doc(product_rows[:, None], states, states, doc_key_mask)[:, 0]
        combined = torch.cat([ud, pd, user_rows, product_rows, cls_state], dim=-1)
        return self.classifier(combined)

    def forward_trace(self, output: EncoderOutput, user_index: int,
                      product_index: int,
                      pad_mask: torch.Tensor | None = None) -> ForwardTrace:
        """Single-example full-variant forward from a precomputed encoding.

        pad_mask: optional (L,) bool marking PAD positions to hide from the
        entity-to-document attentions.
        """
        if self.variant is not Variant.FULL_CROSS_CONTEXT:
            raise ValueError(f"forward_trace requires the full variant, not {self.variant.value}")
        n, m = self.user_matrix.shape[0], self.product_matrix.shape[0]
        if not (-1 <= user_index < n and -1 <= product_index < m):
            raise IndexError(f"entity index out of range: {user_index}, {product_index}")
        states = output.token_states
        cls_state = output.cls_state
        u_idx = torch.tensor([user_index])
        p_idx = torch.tensor([product_index])
        user_row = self._rows(self.user_matrix, u_idx)[0]
        product_row = self._rows(self.product_matrix, p_idx)[0]
        q_user = self.fuse_user(torch.cat([user_row, cls_state]))
        q_product = self.fuse_product(torch.cat([product_row, cls_state]))
        uu = self.attn_user_user(q_user[None], self.user_matrix, self.user_matrix,
                                 self._self_mask(u_idx, n)[0])[0]
        pp = self.attn_product_product(q_product[None], self.product_matrix,
                                       self.product_matrix,
                                       self._self_mask(p_idx, m)[0])[0]
        up = self.attn_user_product(q_user[None], self.product_matrix,
                                    self.product_matrix)[0]
        pu = self.attn_product_user(q_product[None], self.user_matrix,
                                    self.user_matrix)[0]
        doc_mask = None if pad_mask is None else pad_mask[None, :]
        ud = self.attn_user_doc(q_user[None], states, states, doc_mask)[0]
        pd = self.attn_product_doc(q_product[None], states, states, doc_mask)[0]
        combined = torch.cat([uu, pp, up, pu, ud, pd, q_user, q_product, cls_state])
        logits = self.classifier(combined)
        return ForwardTrace(cls_state, q_user, q_product, uu, pp, up, pu, ud, pd,
                            combined, logits)


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax at the gold class; labels are 0-based."""
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError(f"label outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def predict_classes(logits: np.ndarray) -> np.ndarray:
    """1-based argmax predictions; ties resolved to the lowest class index."""
    return np.argmax(logits, axis=-1) + 1
