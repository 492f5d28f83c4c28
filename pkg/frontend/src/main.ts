import { DashboardApp } from "./app.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");
new DashboardApp(root, document).mount();
