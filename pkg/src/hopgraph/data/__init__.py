"""Small files shipped with the package: toy captions, filter settings and a toy corpus."""
