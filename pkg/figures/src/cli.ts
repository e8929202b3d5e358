/**
 * Command line: `sleepnet-figures render --spec <figure-spec.json>`.
 *
 * The spec file holds one figure spec or an array of them.  Exits 1 on a
 * schema-version mismatch or malformed spec, after printing why.
 */

import { readFileSync } from "fs";

import { FigureSpec, renderFigure } from "./render.js";
import { SchemaError } from "./schema.js";

function usage(): never {
  console.error("usage: sleepnet-figures render --spec <figure-spec.json>");
  process.exit(1);
}

export function main(argv: string[]): number {
  if (argv[0] !== "render") usage();
  const specIdx = argv.indexOf("--spec");
  if (specIdx < 0 || !argv[specIdx + 1]) usage();
  const specPath = argv[specIdx + 1];

  let specs: FigureSpec[];
  try {
    const raw = JSON.parse(readFileSync(specPath, "utf8"));
    specs = Array.isArray(raw) ? raw : [raw];
  } catch (err) {
    console.error(`cannot read figure spec ${specPath}: ${(err as Error).message}`);
    return 1;
  }

  for (const spec of specs) {
    try {
      const out = renderFigure(spec, (msg) => console.error(`warning: ${msg}`));
      console.log(`wrote ${out}`);
    } catch (err) {
      if (err instanceof SchemaError) {
        console.error(`refusing to render: ${err.message}`);
      } else {
        console.error(`render failed: ${(err as Error).message}`);
      }
      return 1;
    }
  }
  return 0;
}

const invokedDirectly = process.argv[1] && import.meta.url.endsWith(
  process.argv[1].split("/").pop() ?? "",
);
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
