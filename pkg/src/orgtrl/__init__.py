"""ORG-TRL: object relational graph encoding and teacher-recommended learning
for video captioning, at desk scale."""

__version__ = "0.1.0"
