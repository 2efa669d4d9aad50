import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // Interop and CLI tests spawn real python3/node processes.
    testTimeout: 30000,
  },
});
