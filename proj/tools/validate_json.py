#!/usr/bin/env python3
"""Validate JSON documents against one of the schemas in docs/schemas.

usage: validate_json.py SCHEMA DOCUMENT [DOCUMENT ...]
Exit status 0 when every document is valid, 1 otherwise.
"""
import argparse
import json
import sys

import jsonschema


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("schema")
    parser.add_argument("documents", nargs="+")
    args = parser.parse_args()

    with open(args.schema, encoding="utf-8") as f:
        schema = json.load(f)
    validator_cls = jsonschema.validators.validator_for(schema)
    validator_cls.check_schema(schema)
    validator = validator_cls(schema)

    ok = True
    for path in args.documents:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
        for err in errors:
            where = "/".join(str(p) for p in err.path) or "<root>"
            print(f"{path}: {where}: {err.message}", file=sys.stderr)
        ok = ok and not errors
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
