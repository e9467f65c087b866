#include "docplug/plugin.hpp"

#include <ctime>

namespace docplug {

DocumentPlugin encode_document(const Document& doc, const Model& backbone) {
  std::vector<int> ids = doc.all_tokens();
  if (ids.empty()) throw InputError("encode_document: empty document " + doc.doc_id);
  if (static_cast<int>(ids.size()) > kDocTokenCap) ids.resize(kDocTokenCap);

  NoGradGuard ng;
  DocumentPlugin plugin;
  plugin.doc_id = doc.doc_id;
  plugin.raw_states = backbone.encode(ids);
  plugin.raw_states.quantize_f32();
  plugin.model_hash = backbone.origin_hash();
  plugin.created_at = static_cast<int64_t>(std::time(nullptr));
  return plugin;
}

Prefixes map_plugin(const DocumentPlugin& plugin, const Model& model) {
  if (plugin.width() != model.config().d_model) {
    throw ShapeError("plugin width does not match model d_model");
  }
  return model.map_prefix(plugin.raw_states);
}

PluggedModel insert(const Model& model, const DocumentPlugin& plugin, bool force) {
  if (!force && plugin.model_hash != model.origin_hash()) {
    throw CompatError("plugin '" + plugin.doc_id +
                      "' was encoded by a different backbone (pass force to override)");
  }
  return PluggedModel(model, map_plugin(plugin, model));
}

}  // namespace docplug
