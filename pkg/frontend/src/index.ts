export * from "./wire.js";
export * from "./handlers.js";
export * from "./session.js";
