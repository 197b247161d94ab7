#include "spinelab/prep_dataset.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "spinelab/error.hpp"

namespace spinelab::prep {

namespace fs = std::filesystem;

void PreprocessedIndex::save(const std::string& dir) const {
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / "index.txt");
  if (!os) throw Error("cannot write index in " + dir);
  os.precision(17);
  os << "sigma_mm " << sigma_mm << "\n";
  os << "resample_mm " << resample_mm << "\n";
  os << "weights " << weight_table_path << "\n";
  for (const auto& s : scans) {
    os << "scan " << s.scan_id << " " << s.split << " " << s.centroid_path
       << "\n";
    os << "full " << s.scan_id << " " << s.sag_full << " " << s.cor_full
       << "\n";
    os << "gt " << s.scan_id << " " << s.sag_gt << " " << s.cor_gt << "\n";
    for (size_t i = 0; i < s.sag_aug.size(); ++i) {
      os << "aug " << s.scan_id << " " << s.sag_aug[i] << " " << s.cor_aug[i]
         << "\n";
    }
  }
}

PreprocessedIndex PreprocessedIndex::load(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "index.txt");
  if (!is) throw Error("missing preprocessed index in " + dir);
  PreprocessedIndex idx;
  std::map<std::string, size_t> by_id;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    auto fail = [&](const std::string& why) {
      throw FormatError(dir + "/index.txt:" + std::to_string(lineno) + ": " +
                        why);
    };
    if (tag == "sigma_mm") {
      ls >> idx.sigma_mm;
    } else if (tag == "resample_mm") {
      ls >> idx.resample_mm;
    } else if (tag == "weights") {
      ls >> idx.weight_table_path;
    } else if (tag == "scan") {
      PreprocessedScan s;
      if (!(ls >> s.scan_id >> s.split >> s.centroid_path))
        fail("expected `scan id split centroids`");
      by_id[s.scan_id] = idx.scans.size();
      idx.scans.push_back(std::move(s));
    } else {
      std::string id, a, b;
      if (!(ls >> id >> a >> b)) fail("expected `" + tag + " id sag cor`");
      auto it = by_id.find(id);
      if (it == by_id.end()) fail("unknown scan id '" + id + "'");
      PreprocessedScan& s = idx.scans[it->second];
      if (tag == "full") {
        s.sag_full = a;
        s.cor_full = b;
      } else if (tag == "gt") {
        s.sag_gt = a;
        s.cor_gt = b;
      } else if (tag == "aug") {
        s.sag_aug.push_back(a);
        s.cor_aug.push_back(b);
      } else {
        fail("unknown record '" + tag + "'");
      }
    }
  }
  return idx;
}

}  // namespace spinelab::prep
