#include "tide/adapter.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace tide {

const char* to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Module: return "module";
    case NodeKind::ModuleList: return "module-list";
    case NodeKind::Linear: return "linear";
    case NodeKind::Embedding: return "embedding";
    case NodeKind::Norm: return "norm";
  }
  return "module";
}

const char* to_string(AdapterComponent component) {
  switch (component) {
    case AdapterComponent::Layers: return "layers";
    case AdapterComponent::FinalNorm: return "final_norm";
    case AdapterComponent::LmHead: return "lm_head";
    case AdapterComponent::Embedding: return "embedding";
    case AdapterComponent::HiddenDim: return "hidden_dim";
  }
  return "unknown";
}

const char* to_string(ResolutionMethod method) {
  switch (method) {
    case ResolutionMethod::NamedPath: return "named-path";
    case ResolutionMethod::FallbackHeuristic: return "fallback-heuristic";
    case ResolutionMethod::Custom: return "custom";
  }
  return "unknown";
}

const ManifestNode* ManifestNode::child(std::string_view attr) const {
  for (const auto& c : children) {
    if (c.name == attr) return &c;
  }
  return nullptr;
}

const ManifestNode* ModelManifest::find(std::string_view dotted_path) const {
  const ManifestNode* node = &root;
  while (!dotted_path.empty()) {
    const auto dot = dotted_path.find('.');
    node = node->child(dotted_path.substr(0, dot));
    if (node == nullptr) return nullptr;
    dotted_path = dot == std::string_view::npos ? std::string_view{} : dotted_path.substr(dot + 1);
  }
  return node;
}

// ---------------------------------------------------------------- parsing
//
// Grammar (see docs/manifest-format.md):
//   line    := config | node | comment | blank
//   config  := "@config" (key "=" uint)*
//   node    := indent name ":" kind [ "[" uint ("x" uint)? "]" ]
//   indent  := two spaces per nesting level

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void parse_fail(int lineno, const std::string& msg) {
  throw ManifestParseError("manifest line " + std::to_string(lineno) + ": " + msg);
}

std::size_t parse_uint(const std::string& s, int lineno) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), ::isdigit)) {
    parse_fail(lineno, "expected unsigned integer, got '" + s + "'");
  }
  return std::stoull(s);
}

NodeKind parse_kind(const std::string& s, int lineno) {
  if (s == "module") return NodeKind::Module;
  if (s == "module-list") return NodeKind::ModuleList;
  if (s == "linear") return NodeKind::Linear;
  if (s == "embedding") return NodeKind::Embedding;
  if (s == "norm") return NodeKind::Norm;
  parse_fail(lineno, "unknown node kind '" + s + "'");
}

}  // namespace

ModelManifest ModelManifest::parse(std::string_view text) {
  ModelManifest m;
  m.root.name = "";
  m.root.kind = NodeKind::Module;

  // Open nodes by depth, as child-index paths from the root. Indices rather
  // than pointers because appending to a children vector moves its siblings.
  std::vector<std::vector<std::size_t>> index_stack{{}};

  auto node_at = [&](const std::vector<std::size_t>& idx) {
    ManifestNode* n = &m.root;
    for (std::size_t i : idx) n = &n->children[i];
    return n;
  };

  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;

    const std::size_t spaces = line.find_first_not_of(' ');
    if (line[spaces] == '\t') parse_fail(lineno, "tabs are not allowed for indentation");
    const std::string body = trim(line);

    if (body.rfind("@config", 0) == 0) {
      if (spaces != 0) parse_fail(lineno, "@config must not be indented");
      std::istringstream fields(body.substr(7));
      std::string field;
      while (fields >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) parse_fail(lineno, "config entries are key=value");
        const std::string key = field.substr(0, eq);
        const std::size_t value = parse_uint(field.substr(eq + 1), lineno);
        if (key == "hidden_size") {
          m.hidden_size = value;
        } else if (key == "vocab_size") {
          m.vocab_size = value;
        } else {
          parse_fail(lineno, "unknown config key '" + key + "'");
        }
      }
      continue;
    }

    if (spaces % 2 != 0) parse_fail(lineno, "indentation must be a multiple of two spaces");
    const std::size_t depth = spaces / 2 + 1;
    if (depth > index_stack.size()) parse_fail(lineno, "indentation skips a level");
    index_stack.resize(depth);

    const auto colon = body.find(':');
    if (colon == std::string::npos) parse_fail(lineno, "expected 'name: kind'");
    ManifestNode node;
    node.name = trim(body.substr(0, colon));
    if (node.name.empty() || node.name.find('.') != std::string::npos) {
      parse_fail(lineno, "invalid attribute name '" + node.name + "'");
    }
    std::string rest = trim(body.substr(colon + 1));
    std::string shape;
    if (auto lb = rest.find('['); lb != std::string::npos) {
      const auto rb = rest.find(']', lb);
      if (rb == std::string::npos) parse_fail(lineno, "unterminated shape");
      shape = trim(rest.substr(lb + 1, rb - lb - 1));
      rest = trim(rest.substr(0, lb));
    }
    node.kind = parse_kind(rest, lineno);
    if (!shape.empty()) {
      const auto x = shape.find('x');
      if (node.kind == NodeKind::ModuleList) {
        node.child_count = parse_uint(shape, lineno);
      } else if (x == std::string::npos) {
        node.rows = parse_uint(trim(shape), lineno);
      } else {
        node.rows = parse_uint(trim(shape.substr(0, x)), lineno);
        node.cols = parse_uint(trim(shape.substr(x + 1)), lineno);
      }
    } else if (node.kind == NodeKind::ModuleList) {
      parse_fail(lineno, "module-list requires a child count, e.g. [12]");
    }

    ManifestNode* parent = node_at(index_stack.back());
    if (parent->child(node.name) != nullptr) {
      parse_fail(lineno, "duplicate attribute '" + node.name + "'");
    }
    parent->children.push_back(std::move(node));
    auto idx = index_stack.back();
    idx.push_back(parent->children.size() - 1);
    index_stack.push_back(std::move(idx));
  }

  // Listed module-list children may not exceed the declared count.
  std::function<void(const ManifestNode&)> check = [&](const ManifestNode& n) {
    if (n.kind == NodeKind::ModuleList && n.children.size() > n.child_count) {
      throw ManifestParseError("module-list '" + n.name + "' lists more children than declared");
    }
    for (const auto& c : n.children) check(c);
  };
  check(m.root);
  return m;
}

ModelManifest ModelManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestParseError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string AdapterMap::to_text() const {
  std::ostringstream os;
  os << "layers=" << layers << '\n'
     << "layers.method=" << to_string(method_for(AdapterComponent::Layers)) << '\n'
     << "num_layers=" << num_layers << '\n'
     << "final_norm=" << final_norm << '\n'
     << "final_norm.method=" << to_string(method_for(AdapterComponent::FinalNorm)) << '\n'
     << "lm_head=" << lm_head << '\n'
     << "lm_head.method=" << to_string(method_for(AdapterComponent::LmHead)) << '\n'
     << "embedding=" << embedding << '\n'
     << "embedding.method=" << to_string(method_for(AdapterComponent::Embedding)) << '\n'
     << "hidden_dim=" << hidden_dim << '\n'
     << "hidden_dim.method=" << to_string(method_for(AdapterComponent::HiddenDim)) << '\n';
  return os.str();
}

ProbeError::ProbeError(AdapterComponent component, Reason reason, const std::string& detail)
    : std::runtime_error(std::string("cannot resolve ") + to_string(component) + ": " +
                         (reason == Reason::Ambiguous ? "ambiguous: " : "") + detail),
      component_(component),
      reason_(reason) {}

// ---------------------------------------------------------------- probing

namespace {

struct Located {
  std::string path;
  const ManifestNode* node;
  const ManifestNode* parent;
};

void walk(const ManifestNode& node, const ManifestNode* parent, const std::string& path,
          std::vector<Located>& out) {
  if (parent != nullptr) out.push_back({path, &node, parent});
  for (const auto& c : node.children) {
    walk(c, &node, path.empty() ? c.name : path + "." + c.name, out);
  }
}

bool under(const std::string& path, const std::string& prefix) {
  return path.size() > prefix.size() && path.compare(0, prefix.size(), prefix) == 0 &&
         path[prefix.size()] == '.';
}

template <std::size_t N>
std::optional<std::string> first_named(const ModelManifest& m,
                                       const std::array<std::string_view, N>& paths,
                                       NodeKind kind) {
  for (auto p : paths) {
    if (const ManifestNode* n = m.find(p); n != nullptr && n->kind == kind) return std::string(p);
  }
  return std::nullopt;
}

// Nodes of `kind` whose rows equal the vocab size. Candidates outside the
// layers subtree win; more than one remaining candidate is ambiguous.
std::string vocab_shape_match(const std::vector<Located>& nodes, NodeKind kind,
                              std::optional<std::size_t> vocab, const std::string& layers_path,
                              AdapterComponent component) {
  if (!vocab) {
    throw ProbeError(component, ProbeError::Reason::Missing,
                     "no named path matched and config has no vocab_size for shape matching");
  }
  std::vector<std::string> inside, outside;
  for (const auto& loc : nodes) {
    if (loc.node->kind != kind || loc.node->rows != vocab) continue;
    (under(loc.path, layers_path) ? inside : outside).push_back(loc.path);
  }
  const auto& pick = outside.empty() ? inside : outside;
  if (pick.empty()) {
    throw ProbeError(component, ProbeError::Reason::Missing,
                     std::string("no ") + to_string(kind) + " with " + std::to_string(*vocab) +
                         " rows");
  }
  if (pick.size() > 1) {
    std::string names;
    for (const auto& p : pick) names += (names.empty() ? "" : ", ") + p;
    throw ProbeError(component, ProbeError::Reason::Ambiguous,
                     std::to_string(pick.size()) + " candidates with vocab rows (" + names + ")");
  }
  return pick.front();
}

void set_method(AdapterMap& map, AdapterComponent c, ResolutionMethod m) {
  map.method[static_cast<std::size_t>(c)] = m;
}

}  // namespace

AdapterMap probe_builtin(const ModelManifest& manifest) {
  AdapterMap map;
  std::vector<Located> nodes;
  walk(manifest.root, nullptr, "", nodes);

  // Layers: named path, else the largest module-list anywhere in the tree.
  if (auto p = first_named(manifest, kLayerPaths, NodeKind::ModuleList)) {
    map.layers = *p;
    set_method(map, AdapterComponent::Layers, ResolutionMethod::NamedPath);
  } else {
    const Located* best = nullptr;
    bool tie = false;
    for (const auto& loc : nodes) {
      if (loc.node->kind != NodeKind::ModuleList) continue;
      if (best == nullptr || loc.node->child_count > best->node->child_count) {
        best = &loc;
        tie = false;
      } else if (loc.node->child_count == best->node->child_count) {
        tie = true;
      }
    }
    if (best == nullptr) {
      throw ProbeError(AdapterComponent::Layers, ProbeError::Reason::Missing,
                       "no known path and no module-list in manifest");
    }
    if (tie) {
      throw ProbeError(AdapterComponent::Layers, ProbeError::Reason::Ambiguous,
                       "several module-lists share the largest size " +
                           std::to_string(best->node->child_count));
    }
    map.layers = best->path;
    set_method(map, AdapterComponent::Layers, ResolutionMethod::FallbackHeuristic);
  }
  const ManifestNode* layers = manifest.find(map.layers);
  map.num_layers = layers->child_count;

  // Final norm: named path, else the single norm sibling of the layers node.
  if (auto p = first_named(manifest, kFinalNormPaths, NodeKind::Norm)) {
    map.final_norm = *p;
    set_method(map, AdapterComponent::FinalNorm, ResolutionMethod::NamedPath);
  } else {
    const auto dot = map.layers.rfind('.');
    const std::string parent_path = dot == std::string::npos ? "" : map.layers.substr(0, dot);
    const ManifestNode* parent = parent_path.empty() ? &manifest.root : manifest.find(parent_path);
    std::vector<std::string> norms;
    for (const auto& c : parent->children) {
      if (c.kind != NodeKind::Norm) continue;
      norms.push_back(parent_path.empty() ? c.name : parent_path + "." + c.name);
    }
    if (norms.empty()) {
      throw ProbeError(AdapterComponent::FinalNorm, ProbeError::Reason::Missing,
                       "no known path and no norm beside " + map.layers);
    }
    if (norms.size() > 1) {
      throw ProbeError(AdapterComponent::FinalNorm, ProbeError::Reason::Ambiguous,
                       std::to_string(norms.size()) + " norms beside " + map.layers);
    }
    map.final_norm = norms.front();
    set_method(map, AdapterComponent::FinalNorm, ResolutionMethod::FallbackHeuristic);
  }

  if (auto p = first_named(manifest, kLmHeadPaths, NodeKind::Linear)) {
    map.lm_head = *p;
    set_method(map, AdapterComponent::LmHead, ResolutionMethod::NamedPath);
  } else {
    map.lm_head = vocab_shape_match(nodes, NodeKind::Linear, manifest.vocab_size, map.layers,
                                    AdapterComponent::LmHead);
    set_method(map, AdapterComponent::LmHead, ResolutionMethod::FallbackHeuristic);
  }

  if (auto p = first_named(manifest, kEmbeddingPaths, NodeKind::Embedding)) {
    map.embedding = *p;
    set_method(map, AdapterComponent::Embedding, ResolutionMethod::NamedPath);
  } else {
    map.embedding = vocab_shape_match(nodes, NodeKind::Embedding, manifest.vocab_size, map.layers,
                                      AdapterComponent::Embedding);
    set_method(map, AdapterComponent::Embedding, ResolutionMethod::FallbackHeuristic);
  }

  if (!manifest.hidden_size) {
    throw ProbeError(AdapterComponent::HiddenDim, ProbeError::Reason::Missing,
                     "config has no hidden_size");
  }
  map.hidden_dim = *manifest.hidden_size;
  set_method(map, AdapterComponent::HiddenDim, ResolutionMethod::NamedPath);
  return map;
}

void AdapterRegistry::register_adapter(const std::string& name, AdapterResolver resolver) {
  std::lock_guard lock(mutex_);
  for (const auto& [existing, _] : resolvers_) {
    if (existing == name) throw std::invalid_argument("adapter '" + name + "' already registered");
  }
  resolvers_.emplace_back(name, std::move(resolver));
}

bool AdapterRegistry::contains(const std::string& name) const {
  std::lock_guard lock(mutex_);
  return std::any_of(resolvers_.begin(), resolvers_.end(),
                     [&](const auto& entry) { return entry.first == name; });
}

AdapterMap AdapterRegistry::probe(const ModelManifest& manifest) const {
  std::vector<AdapterResolver> snapshot;
  {
    std::lock_guard lock(mutex_);
    for (const auto& entry : resolvers_) snapshot.push_back(entry.second);
  }
  for (const auto& resolver : snapshot) {
    if (auto map = resolver(manifest)) return *map;
  }
  return probe_builtin(manifest);
}

AdapterRegistry& default_registry() {
  static AdapterRegistry registry;
  return registry;
}

}  // namespace tide
