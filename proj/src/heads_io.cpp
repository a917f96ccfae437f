#include <cmath>
#include <fstream>

#include "relkit/error.hpp"
#include "relkit/heads.hpp"

namespace relkit {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDescriptor = "head.json";

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// Ensemble descriptors list member kinds; members carry their own hyperparams.
nlohmann::json ensemble_hyperparams(const EnsembleHead& head) {
  return {{"members", static_cast<int>(head.members().size())}, {"combine", "mean_probs"}};
}

}  // namespace

void save_head(const Head& head, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json doc;
  doc["kind"] = to_string(head.kind());
  doc["seed"] = head.seed;
  doc["train_loss"] = std::isfinite(head.train_loss) ? nlohmann::json(head.train_loss) : nlohmann::json();
  doc["flags"] = head.interpretation_flags();
  doc["input_dim"] = head.input_dim();
  doc["num_classes"] = head.num_classes();
  if (const auto* ens = dynamic_cast<const EnsembleHead*>(&head)) {
    doc["hyperparams"] = ensemble_hyperparams(*ens);
    for (std::size_t m = 0; m < ens->members().size(); ++m) {
      save_head(*ens->members()[m], dir / ("member_" + std::to_string(m)));
    }
  } else {
    doc["hyperparams"] = head.hyperparams();
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, tensor] : head.state()) {
      save_tensor(tensor, dir / (name + ".ubt"));
      names.push_back(name);
    }
    doc["tensors"] = names;
  }
  std::ofstream out(dir / kDescriptor);
  out << doc.dump(2) << '\n';
  if (!out) throw RuntimeFailure("failed to write " + (dir / kDescriptor).string());
}

std::unique_ptr<Head> load_head(const fs::path& dir) {
  const nlohmann::json doc = read_json(dir / kDescriptor);
  HeadSpec spec;
  std::uint64_t seed = 0;
  int input_dim = 0;
  int num_classes = 0;
  try {
    spec = parse_head_spec(doc);
    seed = doc.at("seed").get<std::uint64_t>();
    input_dim = doc.at("input_dim").get<int>();
    num_classes = doc.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError((dir / kDescriptor).string() + ": " + e.what());
  }

  std::unique_ptr<Head> head;
  if (spec.kind == HeadKind::ensemble) {
    const int count = spec.hyperparams.value("members", 0);
    std::vector<std::unique_ptr<Head>> members;
    for (int m = 0; m < count; ++m) members.push_back(load_head(dir / ("member_" + std::to_string(m))));
    head = std::make_unique<EnsembleHead>(std::move(members));
  } else {
    head = make_head(spec, input_dim, num_classes, seed);
    std::map<std::string, Tensor> state;
    for (const auto& name : doc.value("tensors", std::vector<std::string>{})) {
      state.emplace(name, load_tensor(dir / (name + ".ubt")));
    }
    head->load_state(state);
  }
  head->seed = seed;
  const auto& loss = doc.value("train_loss", nlohmann::json());
  head->train_loss = loss.is_number() ? loss.get<double>() : std::numeric_limits<double>::quiet_NaN();
  return head;
}

}  // namespace relkit
