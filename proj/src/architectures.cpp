#include "dlbl/architectures.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace dlbl {

std::string to_string(ArchTag tag) {
  switch (tag) {
    case ArchTag::PC: return "PC";
    case ArchTag::SPL: return "SPL";
    case ArchTag::FPL: return "FPL";
  }
  return "?";
}

ArchTag parse_arch_tag(std::string_view s) {
  std::string u(s);
  for (auto& ch : u) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (u == "PC" || u == "CNN-PC") return ArchTag::PC;
  if (u == "SPL" || u == "CNN-SPL") return ArchTag::SPL;
  if (u == "FPL" || u == "CNN-FPL") return ArchTag::FPL;
  throw ConfigError("unknown architecture '" + std::string(s) + "' (expected PC, SPL or FPL)");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

std::size_t parse_size(const std::string& s, const std::string& key) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("architecture tag: bad value '" + s + "' for " + key);
  }
  return v;
}

double parse_real(const std::string& s, const std::string& key) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("architecture tag: bad value '" + s + "' for " + key);
  }
  return v;
}

std::array<std::size_t, 4> parse_quad(const std::string& s, const std::string& key) {
  auto parts = split(s, ',');
  if (parts.size() != 4) throw ConfigError("architecture tag: " + key + " needs 4 values");
  std::array<std::size_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) out[i] = parse_size(parts[i], key);
  return out;
}

void validate(const ArchSpec& spec) {
  if (spec.in_channels < 1) throw ConfigError("architecture needs in_channels >= 1");
  if (spec.num_classes < 2) throw ConfigError("architecture needs at least 2 classes");
  for (std::size_t i = 0; i < 4; ++i) {
    if (spec.conv_channels[i] < 1) throw ConfigError("conv widths must be >= 1");
    if (spec.conv_kernels[i] % 2 == 0) {
      throw ConfigError("conv kernels must be odd for size-preserving padding");
    }
  }
  if (spec.tag == ArchTag::FPL && spec.deconv_channels < 1) {
    throw ConfigError("deconv width must be >= 1");
  }
}

template <typename Scalar>
void add_block(Network<Scalar>& net, const ArchSpec& spec, std::size_t i,
               std::size_t in_ch, bool pooled) {
  const std::string b = "block" + std::to_string(i + 1);
  const std::size_t k = spec.conv_kernels[i];
  net.add(std::make_unique<Conv2d<Scalar>>(b + ".conv", in_ch, spec.conv_channels[i],
                                           ConvGeometry{k, 1, (k - 1) / 2}));
  net.add(std::make_unique<BatchNorm<Scalar>>(b + ".bn", spec.conv_channels[i]));
  net.add(std::make_unique<LeakyRelu<Scalar>>(b + ".lrelu", static_cast<Scalar>(spec.leak)));
  auto dropout = [&] {
    net.add(std::make_unique<Dropout<Scalar>>(b + ".dropout", spec.dropout));
  };
  if (pooled && spec.dropout_placement == DropoutPlacement::before_pool) dropout();
  if (pooled) {
    net.add(std::make_unique<Pool2d<Scalar>>(b + ".pool",
                                             PoolGeometry{3, 2, 1, PoolMode::max}));
  }
  if (!pooled || spec.dropout_placement == DropoutPlacement::after_pool) dropout();
}

template <typename Scalar>
Network<Scalar> build_impl(const ArchSpec& spec) {
  validate(spec);
  Network<Scalar> net(spec.tag_string());
  std::size_t ch = spec.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const bool pooled = spec.tag == ArchTag::PC || i < 3;
    add_block(net, spec, i, ch, pooled);
    ch = spec.conv_channels[i];
  }
  switch (spec.tag) {
    case ArchTag::PC: {
      const Shape in{1, spec.in_channels, spec.patch_size, spec.patch_size};
      const Shape feat = net.shape_chain(in).back();
      net.add(std::make_unique<FullyConnected<Scalar>>("head.fc", feat, spec.num_classes));
      break;
    }
    case ArchTag::SPL:
      net.add(std::make_unique<Conv2d<Scalar>>("head.conv", ch, spec.num_classes,
                                               ConvGeometry{1, 1, 0}));
      break;
    case ArchTag::FPL:
      for (std::size_t i = 0; i < 3; ++i) {
        const std::string d = "deconv" + std::to_string(i + 1);
        net.add(std::make_unique<Deconv2d<Scalar>>(
            d + ".deconv", ch, spec.deconv_channels,
            ConvGeometry{spec.deconv_kernel, 2, (spec.deconv_kernel - 1) / 2}));
        net.add(std::make_unique<BatchNorm<Scalar>>(d + ".bn", spec.deconv_channels));
        net.add(std::make_unique<LeakyRelu<Scalar>>(d + ".lrelu",
                                                    static_cast<Scalar>(spec.leak)));
        net.add(std::make_unique<Dropout<Scalar>>(d + ".dropout", spec.dropout));
        ch = spec.deconv_channels;
      }
      net.add(std::make_unique<Conv2d<Scalar>>("head.conv", ch, spec.num_classes,
                                               ConvGeometry{1, 1, 0}));
      break;
  }
  return net;
}

}  // namespace

ArchSpec ArchSpec::thinned(std::size_t divisor) const {
  if (divisor == 0) throw ConfigError("width divisor must be >= 1");
  ArchSpec s = *this;
  for (auto& c : s.conv_channels) c = std::max<std::size_t>(1, c / divisor);
  s.deconv_channels = std::max<std::size_t>(1, deconv_channels / divisor);
  return s;
}

std::string ArchSpec::tag_string() const {
  auto quad = [](const std::array<std::size_t, 4>& a) {
    return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," +
           std::to_string(a[2]) + "," + std::to_string(a[3]);
  };
  return to_string(tag) + ";in=" + std::to_string(in_channels) +
         ";classes=" + std::to_string(num_classes) +
         ";patch=" + std::to_string(patch_size) + ";conv=" + quad(conv_channels) +
         ";kernels=" + quad(conv_kernels) + ";deconv=" + std::to_string(deconv_channels) +
         ";deconv_kernel=" + std::to_string(deconv_kernel) + ";leak=" + fmt_double(leak) +
         ";dropout=" + fmt_double(dropout) + ";dropout_at=" +
         (dropout_placement == DropoutPlacement::after_pool ? "after_pool" : "before_pool");
}

ArchSpec ArchSpec::parse(const std::string& tag) {
  auto parts = split(tag, ';');
  if (parts.empty()) throw ConfigError("empty architecture tag");
  ArchSpec s;
  s.tag = parse_arch_tag(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) throw ConfigError("architecture tag: bad field '" + parts[i] + "'");
    const std::string key = parts[i].substr(0, eq);
    const std::string val = parts[i].substr(eq + 1);
    if (key == "in") s.in_channels = parse_size(val, key);
    else if (key == "classes") s.num_classes = parse_size(val, key);
    else if (key == "patch") s.patch_size = parse_size(val, key);
    else if (key == "conv") s.conv_channels = parse_quad(val, key);
    else if (key == "kernels") s.conv_kernels = parse_quad(val, key);
    else if (key == "deconv") s.deconv_channels = parse_size(val, key);
    else if (key == "deconv_kernel") s.deconv_kernel = parse_size(val, key);
    else if (key == "leak") s.leak = parse_real(val, key);
    else if (key == "dropout") s.dropout = parse_real(val, key);
    else if (key == "dropout_at") {
      if (val == "after_pool") s.dropout_placement = DropoutPlacement::after_pool;
      else if (val == "before_pool") s.dropout_placement = DropoutPlacement::before_pool;
      else throw ConfigError("architecture tag: bad dropout_at '" + val + "'");
    } else {
      throw ConfigError("architecture tag: unknown field '" + key + "'");
    }
  }
  validate(s);
  return s;
}

Network<float> build(const ArchSpec& spec) { return build_impl<float>(spec); }
Network<double> build_double(const ArchSpec& spec) { return build_impl<double>(spec); }

std::vector<Shape> shape_chain(const ArchSpec& spec) {
  const Network<float> net = build(spec);
  return net.shape_chain({1, spec.in_channels, spec.patch_size, spec.patch_size});
}

std::vector<std::size_t> spatial_chain(const ArchSpec& spec) {
  const Network<float> net = build(spec);
  const auto shapes =
      net.shape_chain({1, spec.in_channels, spec.patch_size, spec.patch_size});
  std::vector<std::size_t> chain{spec.patch_size};
  for (std::size_t i = 0; i < net.size(); ++i) {
    const std::string kind = net.layer(i).kind();
    if (kind == "maxpool" || kind == "avgpool" || kind == "deconv") {
      chain.push_back(shapes[i].height);
    }
  }
  return chain;
}

ParamCountReport param_count(const ArchSpec& spec) {
  Network<float> net = build(spec);
  ParamCountReport report;
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto params = net.layer(i).params();
    if (params.empty()) continue;
    ParamCount pc{net.layer(i).name()};
    for (auto* p : params) {
      const std::string suffix = p->name.substr(p->name.rfind('.') + 1);
      if (suffix == "weight") pc.weights += p->value.size();
      else if (suffix == "bias" || suffix == "beta") pc.biases += p->value.size();
      else pc.other += p->value.size();
      ++report.learnable_tensors;
    }
    report.total += pc.weights + pc.biases + pc.other;
    report.layers.push_back(pc);
  }
  return report;
}

std::size_t documented_tensor_count(ArchTag tag) {
  return tag == ArchTag::FPL ? 4 * 4 + 3 * 4 + 2 : 4 * 4 + 2;
}

std::size_t receptive_field(const Network<float>& net, std::size_t first_layer,
                            std::size_t last_layer) {
  // rf and jump tracked as rationals over a common denominator so transposed
  // layers (jump / s) stay exact
  std::size_t denom = 1;
  for (std::size_t i = first_layer; i <= last_layer; ++i) {
    const Footprint f = net.layer(i).footprint();
    if (f.transposed) denom *= f.stride;
  }
  std::size_t rf = denom;  // one input pixel
  std::size_t jump = denom;
  for (std::size_t i = first_layer; i <= last_layer; ++i) {
    const Footprint f = net.layer(i).footprint();
    if (f.transposed) {
      const std::size_t taps = (f.kernel + f.stride - 1) / f.stride;
      rf += (taps - 1) * jump;
      jump /= f.stride;
    } else {
      rf += (f.kernel - 1) * jump;
      jump *= f.stride;
    }
  }
  return (rf + denom - 1) / denom;
}

std::size_t bottleneck_layer(const Network<float>& net) {
  std::size_t idx = 0;
  bool found = false;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (net.layer(i).name().rfind("block", 0) == 0) {
      idx = i;
      found = true;
    }
  }
  if (!found) throw ConfigError("network has no downsampling blocks");
  return idx;
}

ReceptiveField receptive_field(const ArchSpec& spec) {
  const Network<float> net = build(spec);
  return {receptive_field(net, 0, bottleneck_layer(net)),
          receptive_field(net, 0, net.size() - 1)};
}

std::map<std::string, std::string> pc_warm_start_map() {
  return {{"block1.", "block1."},
          {"block2.", "block2."},
          {"block3.", "block3."},
          {"block4.", "block4."}};
}

Network<float> load_network(const Checkpoint& ck) {
  Network<float> net = build(ArchSpec::parse(ck.arch_tag));
  load_into(net, ck);
  net.set_mode(Mode::eval);
  return net;
}

Network<float> load_network(const std::filesystem::path& path) {
  return load_network(read_checkpoint(path));
}

Network<float> load_network(const std::filesystem::path& path, const ArchSpec& expected) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.arch_tag != expected.tag_string()) {
    throw DataError("checkpoint " + path.string() + " holds architecture '" + ck.arch_tag +
                    "', expected '" + expected.tag_string() + "'");
  }
  return load_network(ck);
}

}  // namespace dlbl
