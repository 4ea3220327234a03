import { mountEditor } from "./ui.js";

const root = document.getElementById("app");
if (root) {
  const base = new URLSearchParams(window.location.search).get("api") ?? "";
  void mountEditor(root, base);
}
