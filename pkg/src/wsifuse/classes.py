"""Tissue class vocabulary shared by every module."""

from __future__ import annotations

from enum import IntEnum


class TissueClass(IntEnum):
    NORMAL = 0
    BENIGN = 1
    INSITU = 2
    INVASIVE = 3

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def from_token(cls, token: str) -> "TissueClass":
        # case-sensitive on purpose: files must use the exact lowercase tokens
        for member in cls:
            if member.token == token:
                return member
        raise KeyError(token)


#: Tumor classes in severity order; this order is the global one-hot order.
TUMOR_CLASSES: tuple[TissueClass, ...] = (
    TissueClass.BENIGN,
    TissueClass.INSITU,
    TissueClass.INVASIVE,
)

TUMOR_TOKENS: tuple[str, ...] = tuple(c.token for c in TUMOR_CLASSES)

#: Class set of the binary (proposal) expert.
BINARY_TOKENS: tuple[str, ...] = ("normal", "tumor")


def binary_token(label: TissueClass) -> str:
    return "normal" if label == TissueClass.NORMAL else "tumor"
